use crate::error::{Error, Result};
use crate::numerics::{norm, Tape, Tensor, Var};

/// Projected visual and text embeddings with their class labels.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    pub visual: Tensor,
    pub visual_labels: Vec<usize>,
    pub text: Tensor,
    pub text_labels: Vec<usize>,
}

impl EmbeddingBatch {
    /// `P_i`: indices of the texts sharing sample `i`'s class.
    pub fn positives(&self, i: usize) -> Vec<usize> {
        let y = self.visual_labels[i];
        (0..self.text_labels.len())
            .filter(|&j| self.text_labels[j] == y)
            .collect()
    }
}

fn positive_mask(visual_labels: &[usize], text_labels: &[usize]) -> Result<Vec<bool>> {
    let mut mask = Vec::with_capacity(visual_labels.len() * text_labels.len());
    for (i, &y) in visual_labels.iter().enumerate() {
        let start = mask.len();
        mask.extend(text_labels.iter().map(|&t| t == y));
        if !mask[start..].contains(&true) {
            return Err(Error::Contract(format!(
                "visual sample {i} (class {y}) has no positive text"
            )));
        }
    }
    Ok(mask)
}

/// Multi-positive contrastive alignment loss on the tape:
/// `-(1/N) Σ_i log [Σ_{j∈P_i} exp(cos_ij/τ) / Σ_o exp(cos_io/τ)]`.
pub fn align_loss_tape(
    tape: &mut Tape,
    visual: Var,
    visual_labels: &[usize],
    text: Var,
    text_labels: &[usize],
    tau: f64,
) -> Result<Var> {
    let n = visual_labels.len();
    if tape.value(visual).rows() != n || tape.value(text).rows() != text_labels.len() {
        return Err(Error::dim(
            "align_loss",
            tape.value(visual).shape(),
            &[n, text_labels.len()],
        ));
    }
    let mask = positive_mask(visual_labels, text_labels)?;
    let nv = tape.normalize_rows(visual)?;
    let nt = tape.normalize_rows(text)?;
    let sims = tape.matmul_nt(nv, nt)?;
    let sims = tape.scale(sims, 1.0 / tau);
    let pos = tape.masked_log_sum_exp(sims, &mask)?;
    let all = tape.masked_log_sum_exp(sims, &vec![true; mask.len()])?;
    let diff = tape.sub(all, pos)?;
    let total = tape.sum(diff);
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// Prototype classification loss on the tape: cross-entropy of the cosine
/// logits of every visual and text embedding against the rows of `table`,
/// averaged over `N + |T|`.
pub fn class_loss_tape(
    tape: &mut Tape,
    visual: Var,
    visual_labels: &[usize],
    text: Var,
    text_labels: &[usize],
    table: Var,
    tau: f64,
) -> Result<Var> {
    let w = tape.value(table);
    let c = w.rows();
    for k in 0..c {
        if norm(w.row(k)) == 0.0 {
            return Err(Error::DegenerateVector(format!(
                "prototype {k} has zero norm"
            )));
        }
    }
    let labels: Vec<usize> = visual_labels.iter().chain(text_labels).copied().collect();
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Contract(format!("label {bad} outside {c} classes")));
    }
    let x = tape.concat_rows(&[visual, text])?;
    let nx = tape.normalize_rows(x)?;
    let nw = tape.normalize_rows(table)?;
    let logits = tape.matmul_nt(nx, nw)?;
    let logits = tape.scale(logits, 1.0 / tau);
    let ce = tape.cross_entropy(logits, &labels)?;
    Ok(tape.scale(ce, 1.0 / labels.len() as f64))
}

/// Value of the alignment loss for a batch.
pub fn align_loss(batch: &EmbeddingBatch, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(batch.visual.clone());
    let t = tape.constant(batch.text.clone());
    let l = align_loss_tape(
        &mut tape,
        v,
        &batch.visual_labels,
        t,
        &batch.text_labels,
        tau,
    )?;
    Ok(tape.value(l).item())
}

/// Value of the prototype classification loss for a batch.
pub fn class_loss(batch: &EmbeddingBatch, table: &Tensor, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(batch.visual.clone());
    let t = tape.constant(batch.text.clone());
    let w = tape.constant(table.clone());
    let l = class_loss_tape(
        &mut tape,
        v,
        &batch.visual_labels,
        t,
        &batch.text_labels,
        w,
        tau,
    )?;
    Ok(tape.value(l).item())
}
