use serde::{Deserialize, Serialize};

use crate::embeddings::ClassArtifacts;
use crate::error::{Error, Result};
use crate::numerics::{cosine, Tensor};

/// Patch-by-class cosine scores with per-class maxima.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    /// `M x C` cosine scores.
    pub scores: Tensor,
    /// `r_c`: the maximum of column `c`.
    pub relevance: Vec<f64>,
    /// Patch index attaining `r_c` (lowest index on ties).
    pub argmax: Vec<usize>,
    pub names: Vec<String>,
}

impl ScoreMap {
    /// Builds the map from raw scores, computing maxima and argmaxes.
    pub fn from_scores(scores: Tensor, names: Vec<String>) -> Result<Self> {
        if scores.shape().len() != 2 || scores.cols() != names.len() {
            return Err(Error::dim("score_map", scores.shape(), &[names.len()]));
        }
        let (m, c) = (scores.rows(), scores.cols());
        let mut relevance = vec![f64::NEG_INFINITY; c];
        let mut argmax = vec![0; c];
        for i in 0..m {
            for (k, &s) in scores.row(i).iter().enumerate() {
                if s > relevance[k] {
                    relevance[k] = s;
                    argmax[k] = i;
                }
            }
        }
        Ok(Self {
            scores,
            relevance,
            argmax,
            names,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }
}

/// One detected class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub name: String,
    pub score: f64,
    pub patch: usize,
}

/// Detections ordered by descending score, ascending class id on ties.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub detections: Vec<Detection>,
}

impl DetectionResult {
    pub fn names(&self) -> Vec<String> {
        self.detections.iter().map(|d| d.name.clone()).collect()
    }

    pub fn contains(&self, class_id: usize) -> bool {
        self.detections.iter().any(|d| d.class_id == class_id)
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }
}

/// Projects each encoded patch with `G_vis` and scores it against every
/// class prototype.
pub fn score_map(features: &Tensor, artifacts: &ClassArtifacts) -> Result<ScoreMap> {
    let h = artifacts.heads.vis.forward(features)?;
    let w = &artifacts.table.w;
    let (m, c) = (h.rows(), w.rows());
    let mut data = Vec::with_capacity(m * c);
    for i in 0..m {
        for k in 0..c {
            data.push(cosine(h.row(i), w.row(k))?);
        }
    }
    ScoreMap::from_scores(Tensor::matrix(m, c, data)?, artifacts.table.names.clone())
}

/// The `k` most relevant classes (all of them when `k >= C`).
pub fn top_k(map: &ScoreMap, k: usize) -> Result<DetectionResult> {
    if k == 0 {
        return Err(Error::Contract("top_k needs k >= 1".into()));
    }
    let mut order: Vec<usize> = (0..map.num_classes()).collect();
    order.sort_by(|&a, &b| {
        map.relevance[b]
            .total_cmp(&map.relevance[a])
            .then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(DetectionResult {
        detections: order
            .into_iter()
            .map(|c| Detection {
                class_id: c,
                name: map.names[c].clone(),
                score: map.relevance[c],
                patch: map.argmax[c],
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::embeddings::{ClassEmbeddingTable, ProjectionHeads};

    fn names(c: usize) -> Vec<String> {
        (0..c).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn saturates_at_class_count() {
        let map =
            ScoreMap::from_scores(Tensor::matrix(1, 3, vec![0.1, 0.5, 0.3]).unwrap(), names(3))
                .unwrap();
        let d = top_k(&map, 7).unwrap();
        assert_eq!(
            d.detections.iter().map(|d| d.class_id).collect::<Vec<_>>(),
            vec![1, 2, 0]
        );
    }

    #[test]
    fn ties_go_to_lower_class_id() {
        let map =
            ScoreMap::from_scores(Tensor::matrix(1, 3, vec![0.5, 0.5, 0.5]).unwrap(), names(3))
                .unwrap();
        let ids: Vec<usize> = top_k(&map, 2)
            .unwrap()
            .detections
            .iter()
            .map(|d| d.class_id)
            .collect();
        assert_eq!(ids, vec![0, 1]);
    }

    #[test]
    fn k_zero_is_rejected() {
        let map =
            ScoreMap::from_scores(Tensor::matrix(1, 1, vec![0.5]).unwrap(), names(1)).unwrap();
        assert!(top_k(&map, 0).is_err());
    }

    #[test]
    fn prototype_equal_to_projected_patch_scores_one() {
        let heads = ProjectionHeads::init(3, 3, 4, 2);
        let u = Tensor::matrix(2, 3, vec![0.2, -1.0, 0.7, 1.0, 0.0, -0.3]).unwrap();
        let h = heads.vis.forward(&u).unwrap();
        let mut other = vec![0.0; 4];
        // Orthogonal to the second projected patch.
        let r = h.row(1);
        other[0] = r[1];
        other[1] = -r[0];
        let w = Tensor::from_rows(&[h.row(0).to_vec(), other]).unwrap();
        let art = ClassArtifacts {
            heads,
            table: ClassEmbeddingTable::new(w, names(2), 0.95).unwrap(),
        };
        let map = score_map(&u, &art).unwrap();
        assert!((map.scores.row(0)[0] - 1.0).abs() < 1e-12);
        assert!(map.scores.row(1)[1].abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn relevance_and_top_k_match_brute_force(
            m in 1usize..6,
            c in 1usize..8,
            k in 1usize..10,
            vals in proptest::collection::vec(-1.0f64..1.0, 48),
        ) {
            let scores = Tensor::matrix(m, c, vals[..m * c].to_vec()).unwrap();
            let map = ScoreMap::from_scores(scores.clone(), names(c)).unwrap();
            for k2 in 0..c {
                let col: Vec<f64> = (0..m).map(|i| scores.row(i)[k2]).collect();
                let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(map.relevance[k2], max);
                prop_assert_eq!(col[map.argmax[k2]], max);
            }
            let mut sorted: Vec<(f64, usize)> = map.relevance.iter().copied().zip(0..c).collect();
            sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let got: Vec<usize> = top_k(&map, k).unwrap().detections.iter().map(|d| d.class_id).collect();
            let want: Vec<usize> = sorted.iter().take(k).map(|p| p.1).collect();
            prop_assert_eq!(got, want);
        }
    }
}
