use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ckpt::{self, CheckpointReader, CheckpointWriter};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng;

const MAGIC: &[u8; 4] = b"RLVM";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Visual,
    Prompt,
    Answer,
}

/// Token ids with a role per position. Visual positions form a prefix and
/// carry the `<img>` placeholder id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
    roles: Vec<Role>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, roles: Vec<Role>) -> Result<Self> {
        if ids.len() != roles.len() {
            return Err(Error::dim("token_sequence", &[ids.len()], &[roles.len()]));
        }
        let m = roles.iter().take_while(|r| **r == Role::Visual).count();
        if roles[m..].contains(&Role::Visual) {
            return Err(Error::Contract(
                "visual positions must form a prefix".into(),
            ));
        }
        Ok(Self { ids, roles })
    }

    pub fn build(num_visual: usize, img_id: usize, prompt: &[usize], answer: &[usize]) -> Self {
        let ids = std::iter::repeat_n(img_id, num_visual)
            .chain(prompt.iter().copied())
            .chain(answer.iter().copied())
            .collect();
        let roles = std::iter::repeat_n(Role::Visual, num_visual)
            .chain(std::iter::repeat_n(Role::Prompt, prompt.len()))
            .chain(std::iter::repeat_n(Role::Answer, answer.len()))
            .collect();
        Self { ids, roles }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_visual(&self) -> usize {
        self.roles
            .iter()
            .take_while(|r| **r == Role::Visual)
            .count()
    }

    pub fn text_ids(&self) -> &[usize] {
        &self.ids[self.num_visual()..]
    }

    pub fn answer_ids(&self) -> Vec<usize> {
        self.ids
            .iter()
            .zip(&self.roles)
            .filter(|(_, r)| **r == Role::Answer)
            .map(|(&i, _)| i)
            .collect()
    }

    pub fn push(&mut self, id: usize, role: Role) {
        self.ids.push(id);
        self.roles.push(role);
    }

    /// Positions whose next token is supervised, paired with that token.
    /// Answer-only mode supervises answer tokens; otherwise every text token
    /// after the first is supervised.
    pub fn supervised(&self, answer_only: bool) -> Vec<(usize, usize)> {
        let first_text = self.num_visual();
        (1..self.len())
            .filter(|&i| match self.roles[i] {
                Role::Answer => true,
                Role::Prompt => !answer_only && i > first_text,
                Role::Visual => false,
            })
            .map(|i| (i - 1, self.ids[i]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VlmConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub context: usize,
    pub d_v: usize,
    pub vocab: usize,
}

impl VlmConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide model dim {}",
                self.heads, self.dim
            )));
        }
        if self.layers == 0 || self.context == 0 || self.vocab == 0 {
            return Err(Error::Config(
                "layers, context and vocab must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ff_in: Tensor,
    pub ff_in_bias: Tensor,
    pub ff_out: Tensor,
    pub ff_out_bias: Tensor,
}

/// Weights of the toy decoder-only VLM: token and position embeddings, the
/// visual connector, pre-norm decoder layers, final norm and language head.
#[derive(Debug, Clone, PartialEq)]
pub struct VlmParams {
    pub config: VlmConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub connector: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    pub head: Tensor,
}

fn gaussian(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::matrix(rows, cols, rng::gaussian_vec(rng, rows * cols, std)).expect("shape")
}

impl VlmParams {
    pub fn init(config: VlmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "vlm-init");
        let d = config.dim;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let resid = inv(d) / (2.0 * config.layers as f64).sqrt();
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                ln1_gain: Tensor::vector(vec![1.0; d]),
                ln1_bias: Tensor::vector(vec![0.0; d]),
                wq: gaussian(&mut r, d, d, inv(d)),
                wk: gaussian(&mut r, d, d, inv(d)),
                wv: gaussian(&mut r, d, d, inv(d)),
                wo: gaussian(&mut r, d, d, resid),
                ln2_gain: Tensor::vector(vec![1.0; d]),
                ln2_bias: Tensor::vector(vec![0.0; d]),
                ff_in: gaussian(&mut r, d, config.ff_dim, inv(d)),
                ff_in_bias: Tensor::vector(vec![0.0; config.ff_dim]),
                ff_out: gaussian(&mut r, config.ff_dim, d, resid),
                ff_out_bias: Tensor::vector(vec![0.0; d]),
            })
            .collect();
        Ok(Self {
            tok_emb: gaussian(&mut r, config.vocab, d, 0.5),
            pos_emb: gaussian(&mut r, config.context, d, 0.1),
            connector: gaussian(&mut r, config.d_v, d, inv(config.d_v)),
            layers,
            final_gain: Tensor::vector(vec![1.0; d]),
            final_bias: Tensor::vector(vec![0.0; d]),
            head: gaussian(&mut r, d, config.vocab, inv(d)),
            config,
        })
    }

    /// Every weight tensor in checkpoint order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
            ("connector".into(), &self.connector),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("ln1_gain", &l.ln1_gain),
                ("ln1_bias", &l.ln1_bias),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("ln2_gain", &l.ln2_gain),
                ("ln2_bias", &l.ln2_bias),
                ("ff_in", &l.ff_in),
                ("ff_in_bias", &l.ff_in_bias),
                ("ff_out", &l.ff_out),
                ("ff_out_bias", &l.ff_out_bias),
            ] {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("final_gain".into(), &self.final_gain));
        out.push(("final_bias".into(), &self.final_bias));
        out.push(("head".into(), &self.head));
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb, &mut self.connector];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
                &mut l.ff_in,
                &mut l.ff_in_bias,
                &mut l.ff_out,
                &mut l.ff_out_bias,
            ]);
        }
        out.extend([&mut self.final_gain, &mut self.final_bias, &mut self.head]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn round_to_f32(&mut self) {
        self.tensors_mut()
            .into_iter()
            .for_each(Tensor::round_to_f32);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = CheckpointWriter::new(MAGIC, VERSION);
        w.u32(c.layers as u32)
            .u32(c.heads as u32)
            .u32(c.dim as u32)
            .u32(c.vocab as u32);
        for (name, t) in self.named() {
            w.blob(&name, t);
        }
        w.finish()
    }

    /// CRC32 of the serialized weights; used as the frozen-weights checksum.
    pub fn checksum(&self) -> u32 {
        ckpt::trailer_crc(&self.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = CheckpointReader::open(bytes, MAGIC, path)?;
        let layers = r.u32()? as usize;
        let heads = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let vocab = r.u32()? as usize;
        let tok_emb = r.blob("tok_emb")?;
        let pos_emb = r.blob("pos_emb")?;
        let connector = r.blob("connector")?;
        let mut layer_params = Vec::with_capacity(layers);
        for i in 0..layers {
            let mut b = |n: &str| r.blob(&format!("layer{i}.{n}"));
            layer_params.push(LayerParams {
                ln1_gain: b("ln1_gain")?,
                ln1_bias: b("ln1_bias")?,
                wq: b("wq")?,
                wk: b("wk")?,
                wv: b("wv")?,
                wo: b("wo")?,
                ln2_gain: b("ln2_gain")?,
                ln2_bias: b("ln2_bias")?,
                ff_in: b("ff_in")?,
                ff_in_bias: b("ff_in_bias")?,
                ff_out: b("ff_out")?,
                ff_out_bias: b("ff_out_bias")?,
            });
        }
        let final_gain = r.blob("final_gain")?;
        let final_bias = r.blob("final_bias")?;
        let head = r.blob("head")?;
        r.finish()?;
        let ff_dim = layer_params.first().map_or(0, |l| l.ff_in.cols());
        let config = VlmConfig {
            layers,
            heads,
            dim,
            ff_dim,
            context: pos_emb.rows(),
            d_v: connector.rows(),
            vocab,
        };
        config.validate()?;
        if tok_emb.shape() != [vocab, dim] || head.shape() != [dim, vocab] {
            return Err(Error::Format {
                path: path.into(),
                reason: "embedding shapes disagree with config block".into(),
            });
        }
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            connector,
            layers: layer_params,
            final_gain,
            final_bias,
            head,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        ckpt::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&ckpt::read_file(path)?, path)
    }

    /// Visual tokens `V = U · C_φ` for encoded patch features `U`.
    pub fn connect(&self, features: &Tensor) -> Result<Tensor> {
        if features.shape().len() != 2 || features.cols() != self.config.d_v {
            return Err(Error::dim(
                "connector",
                features.shape(),
                self.connector.shape(),
            ));
        }
        features.matmul(&self.connector)
    }

    pub(crate) fn on_tape(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let mut add = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let tok_emb = add(&self.tok_emb);
        let pos_emb = add(&self.pos_emb);
        let connector = add(&self.connector);
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars {
                ln1_gain: add(&l.ln1_gain),
                ln1_bias: add(&l.ln1_bias),
                wq: add(&l.wq),
                wk: add(&l.wk),
                wv: add(&l.wv),
                wo: add(&l.wo),
                ln2_gain: add(&l.ln2_gain),
                ln2_bias: add(&l.ln2_bias),
                ff_in: add(&l.ff_in),
                ff_in_bias: add(&l.ff_in_bias),
                ff_out: add(&l.ff_out),
                ff_out_bias: add(&l.ff_out_bias),
            })
            .collect();
        ParamVars {
            tok_emb,
            pos_emb,
            connector,
            layers,
            final_gain: add(&self.final_gain),
            final_bias: add(&self.final_bias),
            head: add(&self.head),
        }
    }

    /// Full forward pass over `seq`, with `visual` (`M x D`) at the visual
    /// positions. Returns logits at every position, the residual stream
    /// before each layer and after the last, and per-head attention maps.
    pub fn forward(&self, visual: Option<&Tensor>, seq: &TokenSequence) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let vars = self.on_tape(&mut tape, false);
        let vis = visual.map(|v| tape.constant(v.clone()));
        let fwd = forward_tape(&mut tape, &self.config, &vars, vis, seq)?;
        let logits = tape.matmul(fwd.normed, vars.head)?;
        Ok(ForwardOutput {
            logits: tape.value(logits).clone(),
            hidden: fwd.hidden.iter().map(|&h| tape.value(h).clone()).collect(),
            attention: fwd
                .attention
                .iter()
                .map(|layer| layer.iter().map(|&a| tape.value(a).clone()).collect())
                .collect(),
        })
    }

    /// Logits for the last position only.
    pub fn next_token_logits(
        &self,
        visual: Option<&Tensor>,
        seq: &TokenSequence,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.on_tape(&mut tape, false);
        let vis = visual.map(|v| tape.constant(v.clone()));
        let fwd = forward_tape(&mut tape, &self.config, &vars, vis, seq)?;
        let last = seq.len() - 1;
        let row = tape.constant(Tensor::matrix(
            1,
            self.config.dim,
            tape.value(fwd.normed).row(last).to_vec(),
        )?);
        let logits = tape.matmul(row, vars.head)?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// Greedy decoding from `prompt`; stops at `eos` (not included) or after
    /// `max_len` tokens. Ties go to the lowest token id.
    pub fn generate(
        &self,
        visual: Option<&Tensor>,
        prompt: &TokenSequence,
        max_len: usize,
        eos: usize,
    ) -> Result<Vec<usize>> {
        if prompt.len() == prompt.num_visual() {
            return Err(Error::Contract(
                "generation needs a nonempty text prompt".into(),
            ));
        }
        let mut seq = prompt.clone();
        let mut out = Vec::new();
        for _ in 0..max_len {
            if seq.len() >= self.config.context {
                break;
            }
            let logits = self.next_token_logits(visual, &seq)?;
            let next = argmax(&logits);
            if next == eos {
                break;
            }
            out.push(next);
            seq.push(next, Role::Answer);
        }
        Ok(out)
    }

    /// Final norm and language head applied to one residual-stream vector.
    pub fn lens_logits(&self, hidden: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::matrix(1, hidden.len(), hidden.to_vec())?);
        let g = tape.constant(self.final_gain.clone());
        let b = tape.constant(self.final_bias.clone());
        let head = tape.constant(self.head.clone());
        let n = tape.layer_norm(h, g, b)?;
        let logits = tape.matmul(n, head)?;
        Ok(tape.value(logits).data().to_vec())
    }
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    /// `layers + 1` residual-stream states, each `len x D`.
    pub hidden: Vec<Tensor>,
    /// Per layer, per head: `len x len` causal attention weights.
    pub attention: Vec<Vec<Tensor>>,
}

pub(crate) struct LayerVars {
    ln1_gain: Var,
    ln1_bias: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ln2_gain: Var,
    ln2_bias: Var,
    ff_in: Var,
    ff_in_bias: Var,
    ff_out: Var,
    ff_out_bias: Var,
}

pub(crate) struct ParamVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub connector: Var,
    layers: Vec<LayerVars>,
    pub final_gain: Var,
    pub final_bias: Var,
    pub head: Var,
}

impl ParamVars {
    /// Handles in the same order as [`VlmParams::tensors_mut`].
    pub(crate) fn all(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb, self.connector];
        for l in &self.layers {
            out.extend([
                l.ln1_gain,
                l.ln1_bias,
                l.wq,
                l.wk,
                l.wv,
                l.wo,
                l.ln2_gain,
                l.ln2_bias,
                l.ff_in,
                l.ff_in_bias,
                l.ff_out,
                l.ff_out_bias,
            ]);
        }
        out.extend([self.final_gain, self.final_bias, self.head]);
        out
    }
}

pub(crate) struct TapeForward {
    pub hidden: Vec<Var>,
    pub attention: Vec<Vec<Var>>,
    /// Final-norm output, `len x D`.
    pub normed: Var,
}

pub(crate) fn forward_tape(
    tape: &mut Tape,
    config: &VlmConfig,
    vars: &ParamVars,
    visual: Option<Var>,
    seq: &TokenSequence,
) -> Result<TapeForward> {
    let m = seq.num_visual();
    let len = seq.len();
    if len == 0 {
        return Err(Error::Contract("empty token sequence".into()));
    }
    if len > config.context {
        return Err(Error::Length {
            len,
            limit: config.context,
        });
    }
    let vis_rows = visual.map_or(0, |v| tape.value(v).rows());
    if vis_rows != m {
        return Err(Error::dim("forward", &[vis_rows], &[m]));
    }
    let text_ids = seq.text_ids();
    let mut parts = Vec::new();
    if let Some(v) = visual {
        parts.push(v);
    }
    if !text_ids.is_empty() {
        parts.push(tape.gather_rows(vars.tok_emb, text_ids)?);
    }
    let emb = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_rows(&parts)?
    };
    let positions: Vec<usize> = (0..len).collect();
    let pos = tape.gather_rows(vars.pos_emb, &positions)?;
    let mut x = tape.add(emb, pos)?;

    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut hidden = vec![x];
    let mut attention = Vec::with_capacity(config.layers);
    for l in &vars.layers {
        let h = tape.layer_norm(x, l.ln1_gain, l.ln1_bias)?;
        let q = tape.matmul(h, l.wq)?;
        let k = tape.matmul(h, l.wk)?;
        let v = tape.matmul(h, l.wv)?;
        let mut heads = Vec::with_capacity(config.heads);
        let mut maps = Vec::with_capacity(config.heads);
        for hd in 0..config.heads {
            let qh = tape.slice_cols(q, hd * dh, dh)?;
            let kh = tape.slice_cols(k, hd * dh, dh)?;
            let vh = tape.slice_cols(v, hd * dh, dh)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let att = tape.causal_softmax_rows(scores)?;
            maps.push(att);
            heads.push(tape.matmul(att, vh)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let proj = tape.matmul(cat, l.wo)?;
        x = tape.add(x, proj)?;
        let h2 = tape.layer_norm(x, l.ln2_gain, l.ln2_bias)?;
        let f = tape.matmul(h2, l.ff_in)?;
        let f = tape.add_bias(f, l.ff_in_bias)?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, l.ff_out)?;
        let f = tape.add_bias(f, l.ff_out_bias)?;
        x = tape.add(x, f)?;
        hidden.push(x);
        attention.push(maps);
    }
    let normed = tape.layer_norm(x, vars.final_gain, vars.final_bias)?;
    Ok(TapeForward {
        hidden,
        attention,
        normed,
    })
}

/// Summed next-token cross-entropy at `supervised` `(position, target)`
/// pairs, built on `tape`. With `tied`, the head is the transposed token
/// embedding table.
pub(crate) fn supervised_nll(
    tape: &mut Tape,
    vars: &ParamVars,
    normed: Var,
    supervised: &[(usize, usize)],
    tied: bool,
) -> Result<Var> {
    if supervised.is_empty() {
        return Err(Error::Contract("no supervised positions".into()));
    }
    let positions: Vec<usize> = supervised.iter().map(|&(p, _)| p).collect();
    let targets: Vec<usize> = supervised.iter().map(|&(_, t)| t).collect();
    let rows = tape.gather_rows(normed, &positions)?;
    let logits = if tied {
        tape.matmul_nt(rows, vars.tok_emb)?
    } else {
        tape.matmul(rows, vars.head)?
    };
    tape.cross_entropy(logits, &targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gelu;

    fn config(layers: usize, heads: usize) -> VlmConfig {
        VlmConfig {
            layers,
            heads,
            dim: 8,
            ff_dim: 12,
            context: 16,
            d_v: 8,
            vocab: 11,
        }
    }

    fn visual(m: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "test-visual");
        Tensor::matrix(m, 8, rng::gaussian_vec(&mut r, m * 8, 1.0)).unwrap()
    }

    fn seq(m: usize) -> TokenSequence {
        TokenSequence::build(m, 4, &[1, 5, 6, 7], &[8, 2])
    }

    fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let is = 1.0 / (var + 1e-5).sqrt();
        x.iter()
            .zip(g)
            .zip(b)
            .map(|((v, g), b)| (v - mean) * is * g + b)
            .collect()
    }

    fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
        (0..w.cols())
            .map(|j| x.iter().enumerate().map(|(i, v)| v * w.row(i)[j]).sum())
            .collect()
    }

    #[test]
    fn causality_holds_under_token_perturbation() {
        let vlm = VlmParams::init(config(2, 2), 1).unwrap();
        let v = visual(3, 0);
        let a = seq(3);
        let base = vlm.forward(Some(&v), &a).unwrap();
        for j in 3..a.len() {
            let mut ids = a.ids().to_vec();
            ids[j] = (ids[j] + 1) % 11;
            let b = TokenSequence::new(ids, a.roles().to_vec()).unwrap();
            let out = vlm.forward(Some(&v), &b).unwrap();
            for i in 0..j {
                assert_eq!(
                    base.logits.row(i),
                    out.logits.row(i),
                    "position {i} changed by {j}"
                );
            }
            assert_ne!(base.logits.row(j), out.logits.row(j));
        }
    }

    #[test]
    fn single_layer_single_head_matches_hand_rolled_oracle() {
        let vlm = VlmParams::init(config(1, 1), 3).unwrap();
        let v = visual(2, 1);
        let s = seq(2);
        let out = vlm.forward(Some(&v), &s).unwrap();
        let l = &vlm.layers[0];
        let n = s.len();
        let x: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let e = if i < 2 {
                    v.row(i)
                } else {
                    vlm.tok_emb.row(s.ids()[i])
                };
                e.iter()
                    .zip(vlm.pos_emb.row(i))
                    .map(|(a, b)| a + b)
                    .collect()
            })
            .collect();
        let h: Vec<Vec<f64>> = x
            .iter()
            .map(|r| layer_norm(r, l.ln1_gain.data(), l.ln1_bias.data()))
            .collect();
        let q: Vec<Vec<f64>> = h.iter().map(|r| vec_mat(r, &l.wq)).collect();
        let k: Vec<Vec<f64>> = h.iter().map(|r| vec_mat(r, &l.wk)).collect();
        let val: Vec<Vec<f64>> = h.iter().map(|r| vec_mat(r, &l.wv)).collect();
        let scale = 1.0 / 8f64.sqrt();
        for i in 0..n {
            let s: Vec<f64> = (0..=i)
                .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
            let a: Vec<f64> = s.iter().map(|v| (v - mx).exp() / z).collect();
            for (j, &w) in a.iter().enumerate() {
                assert!((out.attention[0][0].row(i)[j] - w).abs() < 1e-10);
            }
            let mut ctx = vec![0.0; 8];
            for (j, &w) in a.iter().enumerate() {
                for d in 0..8 {
                    ctx[d] += w * val[j][d];
                }
            }
            let proj = vec_mat(&ctx, &l.wo);
            let x1: Vec<f64> = x[i].iter().zip(&proj).map(|(a, b)| a + b).collect();
            let h2 = layer_norm(&x1, l.ln2_gain.data(), l.ln2_bias.data());
            let f: Vec<f64> = vec_mat(&h2, &l.ff_in)
                .iter()
                .zip(l.ff_in_bias.data())
                .map(|(a, b)| gelu(a + b))
                .collect();
            let f2 = vec_mat(&f, &l.ff_out);
            let x2: Vec<f64> = x1
                .iter()
                .zip(&f2)
                .zip(l.ff_out_bias.data())
                .map(|((a, b), c)| a + b + c)
                .collect();
            for d in 0..8 {
                assert!((out.hidden[1].row(i)[d] - x2[d]).abs() < 1e-10);
            }
            let logits = vec_mat(
                &layer_norm(&x2, vlm.final_gain.data(), vlm.final_bias.data()),
                &vlm.head,
            );
            for t in 0..11 {
                assert!((out.logits.row(i)[t] - logits[t]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_visual_tokens_is_a_pure_language_model() {
        let vlm = VlmParams::init(config(2, 2), 4).unwrap();
        let s = seq(0);
        let a = vlm.forward(None, &s).unwrap();
        let b = vlm.forward(Some(&Tensor::zeros(&[0, 8])), &s);
        assert!(b.is_err() || b.unwrap().logits == a.logits);
        assert_eq!(a.logits.rows(), s.len());
        assert!(vlm.forward(Some(&visual(2, 0)), &s).is_err());
        assert!(vlm.forward(None, &seq(2)).is_err());
    }

    #[test]
    fn overlong_sequences_are_rejected() {
        let vlm = VlmParams::init(config(1, 1), 4).unwrap();
        let s = TokenSequence::build(0, 4, &[1; 17], &[]);
        assert!(matches!(
            vlm.forward(None, &s),
            Err(Error::Length { len: 17, limit: 16 })
        ));
    }

    #[test]
    fn generate_matches_step_by_step_oracle() {
        let vlm = VlmParams::init(config(2, 2), 5).unwrap();
        let v = visual(3, 2);
        let prompt = TokenSequence::build(3, 4, &[1, 5, 6], &[]);
        let got = vlm.generate(Some(&v), &prompt, 6, 2).unwrap();
        let mut s = prompt.clone();
        let mut want = Vec::new();
        for _ in 0..6 {
            let out = vlm.forward(Some(&v), &s).unwrap();
            let next = argmax(out.logits.row(s.len() - 1));
            if next == 2 {
                break;
            }
            want.push(next);
            s.push(next, Role::Answer);
        }
        assert_eq!(got, want);
        assert_eq!(vlm.generate(Some(&v), &prompt, 6, 2).unwrap(), got);
        assert!(vlm.generate(Some(&v), &prompt, 0, 2).unwrap().is_empty());
    }

    #[test]
    fn generation_never_exceeds_context() {
        let vlm = VlmParams::init(config(1, 1), 6).unwrap();
        let prompt = TokenSequence::build(0, 4, &[1; 14], &[]);
        let out = vlm.generate(None, &prompt, 10, usize::MAX).unwrap();
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn identity_connector_passes_features_through() {
        let mut vlm = VlmParams::init(config(1, 1), 7).unwrap();
        let u = visual(4, 3);
        let v1 = vlm.connect(&u).unwrap();
        assert_eq!(v1, vlm.connect(&u).unwrap());
        let oracle = u.matmul(&vlm.connector).unwrap();
        assert!(v1
            .data()
            .iter()
            .zip(oracle.data())
            .all(|(a, b)| (a - b).abs() < 1e-12));
        vlm.connector = Tensor::identity(8);
        assert_eq!(vlm.connect(&u).unwrap(), u);
        assert!(vlm.connect(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = VlmParams::init(config(2, 2), 9).unwrap();
        let b = VlmParams::init(config(2, 2), 9).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(
            a.checksum(),
            VlmParams::init(config(2, 2), 10).unwrap().checksum()
        );
    }

    #[test]
    fn checkpoint_round_trips_byte_for_byte() {
        let mut vlm = VlmParams::init(config(2, 2), 11).unwrap();
        vlm.round_to_f32();
        let bytes = vlm.to_bytes();
        let back = VlmParams::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, vlm);
        assert_eq!(back.to_bytes(), bytes);
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(matches!(
            VlmParams::from_bytes(&bad, Path::new("mem")),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn bad_head_count_is_a_config_error() {
        assert!(matches!(
            VlmParams::init(config(1, 3), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn supervised_positions_follow_roles() {
        let s = TokenSequence::build(2, 4, &[1, 5], &[8, 2]);
        assert_eq!(s.supervised(true), vec![(3, 8), (4, 2)]);
        assert_eq!(s.supervised(false), vec![(2, 5), (3, 8), (4, 2)]);
        assert!(TokenSequence::new(vec![1, 4], vec![Role::Prompt, Role::Visual]).is_err());
    }
}
