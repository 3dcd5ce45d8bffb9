use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hinting::Pipeline;
use crate::numerics::Tensor;
use crate::synth::{Dataset, Scene};
use crate::vlm::{attention_probe, logit_lens, LensEntry};

/// Probe readings for one scene with unrefined and refined visual tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneProbe {
    pub scene_id: String,
    pub class_id: usize,
    /// Per layer, attention mass on visual positions from the position that
    /// predicts the object token.
    pub attention_baseline: Vec<f64>,
    pub attention_refined: Vec<f64>,
    /// The same from the object token's own position.
    pub token_attention_baseline: Vec<f64>,
    pub token_attention_refined: Vec<f64>,
    /// Object patch positions, the heatmap columns.
    pub positions: Vec<usize>,
    /// Logit-lens probability of the true class token, `(layers + 1) x positions`.
    pub lens_baseline: Vec<Vec<f64>>,
    pub lens_refined: Vec<Vec<f64>>,
    pub ranks_baseline: Vec<Vec<usize>>,
    pub ranks_refined: Vec<Vec<usize>>,
}

fn grid<T>(entries: &[LensEntry], cols: usize, f: impl Fn(&LensEntry) -> T) -> Vec<Vec<T>> {
    entries
        .chunks(cols)
        .map(|row| row.iter().map(&f).collect())
        .collect()
}

/// Teacher-forced probes of the plain question and true answer.
pub fn probe_scene(pipe: &Pipeline, dataset: &Dataset, scene: &Scene) -> Result<SceneProbe> {
    let target = pipe
        .tokenizer
        .id(&dataset.class_names()[scene.class()])
        .ok_or_else(|| Error::Contract(format!("class of {} is not a single token", scene.id())))?;
    let v = pipe.visual_tokens(scene)?;
    let refined = pipe.refine(scene, &v)?;
    let seq = pipe.sequence(v.rows(), &scene.meta.question, Some(&scene.meta.answer));
    let object = seq.len() - seq.answer_ids().len();
    let positions = scene.meta.bbox.token_indices(dataset.grid());
    let read = |tokens: &Tensor| -> Result<(Vec<f64>, Vec<f64>, Vec<LensEntry>)> {
        let out = pipe.vlm.forward(Some(tokens), &seq)?;
        Ok((
            attention_probe(&out, &seq, object - 1)?,
            attention_probe(&out, &seq, object)?,
            logit_lens(pipe.vlm, &out.hidden, &positions, target, 1)?,
        ))
    };
    let (ab, tb, lb) = read(&v)?;
    let (ar, tr, lr) = read(&refined.tokens)?;
    let cols = positions.len();
    Ok(SceneProbe {
        scene_id: scene.id().to_string(),
        class_id: scene.class(),
        attention_baseline: ab,
        attention_refined: ar,
        token_attention_baseline: tb,
        token_attention_refined: tr,
        lens_baseline: grid(&lb, cols, |e| e.target_prob),
        lens_refined: grid(&lr, cols, |e| e.target_prob),
        ranks_baseline: grid(&lb, cols, |e| e.target_rank),
        ranks_refined: grid(&lr, cols, |e| e.target_rank),
        positions,
    })
}

/// Probe aggregates over the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub scenes: usize,
    /// Median logit-lens rank of the true class token over every layer and
    /// object patch.
    pub median_rank_baseline: f64,
    pub median_rank_refined: f64,
    pub rare_median_rank_baseline: f64,
    pub rare_median_rank_refined: f64,
    /// Per-layer means of [`SceneProbe::attention_baseline`] and friends.
    pub attention_baseline: Vec<f64>,
    pub attention_refined: Vec<f64>,
    pub token_attention_baseline: Vec<f64>,
    pub token_attention_refined: Vec<f64>,
    /// Means over layers and scenes.
    pub mean_attention_baseline: f64,
    pub mean_attention_refined: f64,
    pub mean_token_attention_baseline: f64,
    pub mean_token_attention_refined: f64,
}

pub fn median(values: &mut [usize]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_unstable();
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2] as f64
    } else {
        (values[n / 2 - 1] + values[n / 2]) as f64 / 2.0
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

pub fn summarize(probes: &[SceneProbe], dataset: &Dataset) -> ProbeSummary {
    let ranks = |rare_only: bool, refined: bool| {
        let mut all: Vec<usize> = probes
            .iter()
            .filter(|p| !rare_only || dataset.manifest.is_rare(p.class_id))
            .flat_map(|p| {
                if refined {
                    &p.ranks_refined
                } else {
                    &p.ranks_baseline
                }
                .iter()
                .flatten()
                .copied()
            })
            .collect();
        median(&mut all)
    };
    let layers = probes.first().map_or(0, |p| p.attention_baseline.len());
    let layer_mean = |f: &dyn Fn(&SceneProbe) -> &Vec<f64>| -> Vec<f64> {
        (0..layers)
            .map(|l| probes.iter().map(|p| f(p)[l]).sum::<f64>() / probes.len() as f64)
            .collect()
    };
    let attention_baseline = layer_mean(&|p| &p.attention_baseline);
    let attention_refined = layer_mean(&|p| &p.attention_refined);
    let token_attention_baseline = layer_mean(&|p| &p.token_attention_baseline);
    let token_attention_refined = layer_mean(&|p| &p.token_attention_refined);
    ProbeSummary {
        scenes: probes.len(),
        median_rank_baseline: ranks(false, false),
        median_rank_refined: ranks(false, true),
        rare_median_rank_baseline: ranks(true, false),
        rare_median_rank_refined: ranks(true, true),
        mean_attention_baseline: mean(&attention_baseline),
        mean_attention_refined: mean(&attention_refined),
        mean_token_attention_baseline: mean(&token_attention_baseline),
        mean_token_attention_refined: mean(&token_attention_refined),
        attention_baseline,
        attention_refined,
        token_attention_baseline,
        token_attention_refined,
    }
}

/// Probes every test scene, in scene-id order.
pub fn probe_test_split(pipe: &Pipeline, dataset: &Dataset) -> Result<Vec<SceneProbe>> {
    let mut scenes: Vec<&Scene> = dataset.test.iter().collect();
    scenes.sort_by(|a, b| a.id().cmp(b.id()));
    scenes
        .into_iter()
        .map(|s| probe_scene(pipe, dataset, s))
        .collect()
}

/// The default probe scenes: the first test scene of class 0 and of every
/// rare class.
pub fn default_probe_scenes(dataset: &Dataset) -> Vec<String> {
    (0..dataset.num_classes())
        .filter(|&c| c == 0 || dataset.manifest.is_rare(c))
        .filter_map(|c| dataset.test.iter().find(|s| s.class() == c))
        .map(|s| s.id().to_string())
        .collect()
}

const PGM_MAX: u32 = 65535;

/// Writes a grid of values in `[0, 1]` as an ASCII 16-bit graymap, one
/// pixel per cell.
pub fn write_pgm(path: &Path, values: &[Vec<f64>]) -> Result<()> {
    let rows = values.len();
    let cols = values.first().map_or(0, Vec::len);
    let mut out = format!("P2\n{cols} {rows}\n{PGM_MAX}\n");
    for row in values {
        let line: Vec<String> = row
            .iter()
            .map(|v| ((v.clamp(0.0, 1.0) * PGM_MAX as f64).round() as u32).to_string())
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a graymap written by [`write_pgm`] back into values in `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let fail = |reason: &str| Error::Format {
        path: path.into(),
        reason: reason.into(),
    };
    let mut tokens = text.split_whitespace();
    if tokens.next() != Some("P2") {
        return Err(fail("not an ASCII graymap"));
    }
    let mut num = || -> Result<u32> {
        tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| fail("truncated or non-numeric graymap"))
    };
    let (cols, rows, max) = (num()? as usize, num()? as usize, num()?);
    if max == 0 {
        return Err(fail("zero maxval"));
    }
    let mut grid = Vec::with_capacity(rows);
    for _ in 0..rows {
        let row = (0..cols)
            .map(|_| num().map(|v| f64::from(v) / f64::from(max)))
            .collect::<Result<Vec<_>>>()?;
        grid.push(row);
    }
    Ok(grid)
}

/// Largest difference between a value and its graymap reading.
pub const PGM_RESOLUTION: f64 = 0.5 / PGM_MAX as f64;

fn lens_csv(probe: &SceneProbe, refined: bool) -> String {
    let (probs, ranks) = if refined {
        (&probe.lens_refined, &probe.ranks_refined)
    } else {
        (&probe.lens_baseline, &probe.ranks_baseline)
    };
    let mut out = String::from("layer,position,target_prob,target_rank\n");
    for (layer, (p_row, r_row)) in probs.iter().zip(ranks).enumerate() {
        for ((pos, p), r) in probe.positions.iter().zip(p_row).zip(r_row) {
            let _ = writeln!(out, "{layer},{pos},{p},{r}");
        }
    }
    out
}

/// Writes `<id>_attention.csv` and, for each arm, `<id>_lens_<arm>.csv`
/// and `<id>_lens_<arm>.pgm`. Returns the written paths.
pub fn write_scene_probe(dir: &Path, probe: &SceneProbe) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut att = String::from("layer,baseline,refined,token_baseline,token_refined\n");
    for l in 0..probe.attention_baseline.len() {
        let _ = writeln!(
            att,
            "{l},{},{},{},{}",
            probe.attention_baseline[l],
            probe.attention_refined[l],
            probe.token_attention_baseline[l],
            probe.token_attention_refined[l]
        );
    }
    let path = dir.join(format!("{}_attention.csv", probe.scene_id));
    std::fs::write(&path, att).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    for (arm, refined) in [("baseline", false), ("refined", true)] {
        let csv = dir.join(format!("{}_lens_{arm}.csv", probe.scene_id));
        std::fs::write(&csv, lens_csv(probe, refined)).map_err(|e| Error::io(&csv, e))?;
        let pgm = dir.join(format!("{}_lens_{arm}.pgm", probe.scene_id));
        write_pgm(
            &pgm,
            if refined {
                &probe.lens_refined
            } else {
                &probe.lens_baseline
            },
        )?;
        written.extend([csv, pgm]);
    }
    Ok(written)
}

/// Reads a lens CSV back into a `layers x positions` probability grid.
pub fn read_lens_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let fail = |reason: String| Error::Format {
        path: path.into(),
        reason,
    };
    let mut grid: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(fail(format!("line {} has {} fields", i + 1, fields.len())));
        }
        let layer: usize = fields[0]
            .parse()
            .map_err(|_| fail(format!("bad layer on line {}", i + 1)))?;
        let p: f64 = fields[2]
            .parse()
            .map_err(|_| fail(format!("bad probability on line {}", i + 1)))?;
        if layer == grid.len() {
            grid.push(Vec::new());
        }
        grid.get_mut(layer)
            .ok_or_else(|| fail(format!("layers out of order on line {}", i + 1)))?
            .push(p);
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graymap_round_trips_within_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.pgm");
        let values = vec![vec![0.0, 0.25, 1.0], vec![0.123456, 0.999, 1e-7]];
        write_pgm(&path, &values).unwrap();
        let back = read_pgm(&path).unwrap();
        for (a, b) in values.iter().flatten().zip(back.iter().flatten()) {
            assert!((a - b).abs() <= PGM_RESOLUTION);
        }
        std::fs::write(&path, "P5\n1 1\n255\n").unwrap();
        assert!(read_pgm(&path).is_err());
    }

    #[test]
    fn median_of_even_and_odd_counts() {
        assert_eq!(median(&mut [3, 1, 2]), 2.0);
        assert_eq!(median(&mut [4, 1, 2, 3]), 2.5);
        assert!(median(&mut []).is_nan());
    }
}
