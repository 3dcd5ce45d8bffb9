use std::path::Path;

use crate::ckpt::{self, CheckpointReader, CheckpointWriter};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng;
use crate::vlm::{forward_tape, supervised_nll, TokenSequence, VlmParams};

const MAGIC: &[u8; 4] = b"RLAD";
const VERSION: u16 = 1;

/// Cross-attention adapter weights. Queries come from visual tokens, keys
/// and values from class prototypes; the output projection starts at zero
/// so the adapter is the identity until trained.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub heads: usize,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

impl AdapterVars {
    pub fn all(&self) -> [Var; 4] {
        [self.wq, self.wk, self.wv, self.wo]
    }
}

impl AdapterParams {
    pub fn init(dim: usize, heads: usize, seed: u64) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "{heads} adapter heads do not divide dim {dim}"
            )));
        }
        let mut r = rng::stream(seed, "adapter-init");
        let std = 1.0 / (dim as f64).sqrt();
        let mut mat = || Tensor::matrix(dim, dim, rng::gaussian_vec(&mut r, dim * dim, std));
        Ok(Self {
            heads,
            wq: mat()?,
            wk: mat()?,
            wv: mat()?,
            wo: Tensor::zeros(&[dim, dim]),
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.rows()
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn on_tape(&self, tape: &mut Tape, trainable: bool) -> AdapterVars {
        let mut add = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        AdapterVars {
            wq: add(&self.wq),
            wk: add(&self.wk),
            wv: add(&self.wv),
            wo: add(&self.wo),
        }
    }

    /// Refined tokens `V + CrossAttn(V, W)` together with the per-head
    /// attention maps (`M x C`).
    pub fn adapt_with_attention(&self, v: &Tensor, w: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars = self.on_tape(&mut tape, false);
        let vv = tape.constant(v.clone());
        let wv = tape.constant(w.clone());
        let (out, maps) = adapt_tape(&mut tape, self.heads, vars, vv, wv)?;
        Ok((
            tape.value(out).clone(),
            maps.iter().map(|&m| tape.value(m).clone()).collect(),
        ))
    }

    pub fn adapt(&self, v: &Tensor, w: &Tensor) -> Result<Tensor> {
        Ok(self.adapt_with_attention(v, w)?.0)
    }

    /// Serialized form; the class-table checksum precedes the trailer CRC.
    pub fn to_bytes(&self, class_checksum: u32) -> Vec<u8> {
        let mut w = CheckpointWriter::new(MAGIC, VERSION);
        w.u32(self.dim() as u32).u32(self.heads as u32);
        for (name, t) in ["wq", "wk", "wv", "wo"].iter().zip(self.tensors()) {
            w.blob(name, t);
        }
        w.u32(class_checksum);
        w.finish()
    }

    pub fn checksum(&self, class_checksum: u32) -> u32 {
        ckpt::trailer_crc(&self.to_bytes(class_checksum))
    }

    /// Parses a checkpoint and returns it with its recorded class-table
    /// checksum.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<(Self, u32)> {
        let mut r = CheckpointReader::open(bytes, MAGIC, path)?;
        let dim = r.u32()? as usize;
        let heads = r.u32()? as usize;
        let wq = r.blob("wq")?;
        let wk = r.blob("wk")?;
        let wv = r.blob("wv")?;
        let wo = r.blob("wo")?;
        let class_checksum = r.u32()?;
        r.finish()?;
        if [&wq, &wk, &wv, &wo].iter().any(|t| t.shape() != [dim, dim])
            || heads == 0
            || dim % heads != 0
        {
            return Err(Error::Format {
                path: path.into(),
                reason: "adapter shapes disagree with header".into(),
            });
        }
        Ok((
            Self {
                heads,
                wq,
                wk,
                wv,
                wo,
            },
            class_checksum,
        ))
    }

    pub fn save(&self, path: &Path, class_checksum: u32) -> Result<()> {
        ckpt::write_file(path, &self.to_bytes(class_checksum))
    }

    /// Loads an adapter and rejects it unless it was trained against the
    /// class table with checksum `expected_class_checksum`.
    pub fn load(path: &Path, expected_class_checksum: u32) -> Result<Self> {
        let (params, found) = Self::from_bytes(&ckpt::read_file(path)?, path)?;
        if found != expected_class_checksum {
            return Err(Error::Pairing(format!(
                "{} was trained against class table {found:08x}, not {expected_class_checksum:08x}",
                path.display()
            )));
        }
        Ok(params)
    }

    pub fn round_to_f32(&mut self) {
        self.tensors_mut()
            .into_iter()
            .for_each(Tensor::round_to_f32);
    }
}

/// Multi-head cross-attention from `v` (`M x D`) onto `w` (`C x D`) plus the
/// residual. Returns the refined tokens and per-head attention maps.
pub fn adapt_tape(
    tape: &mut Tape,
    heads: usize,
    vars: AdapterVars,
    v: Var,
    w: Var,
) -> Result<(Var, Vec<Var>)> {
    let d = tape.value(vars.wq).rows();
    let (vs, ws) = (
        tape.value(v).shape().to_vec(),
        tape.value(w).shape().to_vec(),
    );
    if vs.len() != 2 || ws.len() != 2 || vs[1] != d || ws[1] != d {
        return Err(Error::dim("adapt", &vs, &ws));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "{heads} adapter heads do not divide dim {d}"
        )));
    }
    let dh = d / heads;
    let q = tape.matmul(v, vars.wq)?;
    let k = tape.matmul(w, vars.wk)?;
    let val = tape.matmul(w, vars.wv)?;
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(val, h * dh, dh)?;
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
        let a = tape.softmax_rows(s)?;
        maps.push(a);
        outs.push(tape.matmul(a, vh)?);
    }
    let cat = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    let delta = tape.matmul(cat, vars.wo)?;
    Ok((tape.add(v, delta)?, maps))
}

/// `‖V̂ - V‖²` on the tape.
pub fn rec_loss_tape(tape: &mut Tape, v: Var, refined: Var) -> Result<Var> {
    let diff = tape.sub(refined, v)?;
    Ok(tape.sum_squares(diff))
}

/// Summed answer negative log-likelihood of the frozen VLM given refined
/// tokens, on the tape. The VLM weights enter as constants.
pub fn autoreg_loss_tape(
    tape: &mut Tape,
    vlm: &VlmParams,
    refined: Var,
    seq: &TokenSequence,
    answer_only: bool,
) -> Result<Var> {
    let sup = seq.supervised(answer_only);
    if sup.is_empty() {
        return Err(Error::Contract(
            "sequence has no supervised position".into(),
        ));
    }
    let vars = vlm.on_tape(tape, false);
    let fwd = forward_tape(tape, &vlm.config, &vars, Some(refined), seq)?;
    supervised_nll(tape, &vars, fwd.normed, &sup, false)
}

pub fn rec_loss(v: &Tensor, refined: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(v.clone());
    let b = tape.constant(refined.clone());
    let l = rec_loss_tape(&mut tape, a, b)?;
    Ok(tape.value(l).item())
}

pub fn autoreg_loss(
    vlm: &VlmParams,
    refined: &Tensor,
    seq: &TokenSequence,
    answer_only: bool,
) -> Result<f64> {
    let mut tape = Tape::new();
    let r = tape.constant(refined.clone());
    let l = autoreg_loss_tape(&mut tape, vlm, r, seq, answer_only)?;
    Ok(tape.value(l).item())
}
