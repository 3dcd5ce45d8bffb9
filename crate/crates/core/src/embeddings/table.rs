use std::path::Path;

use super::heads::{Mlp, ProjectionHeads};
use crate::ckpt::{self, CheckpointReader, CheckpointWriter};
use crate::error::{Error, Result};
use crate::numerics::{norm, Tensor};
use crate::rng;

const MAGIC: &[u8; 4] = b"RLCE";
const VERSION: u16 = 1;

/// Class prototypes `W` (`C x D`) with class names, the EMA coefficient and
/// per-class update counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddingTable {
    pub w: Tensor,
    pub names: Vec<String>,
    pub kappa: f64,
    pub update_counts: Vec<u32>,
}

impl ClassEmbeddingTable {
    pub fn new(w: Tensor, names: Vec<String>, kappa: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&kappa) {
            return Err(Error::Config(format!("kappa {kappa} outside [0, 1]")));
        }
        if w.shape().len() != 2 || w.rows() != names.len() {
            return Err(Error::dim("class_table", w.shape(), &[names.len()]));
        }
        if !w.is_finite() {
            return Err(Error::NonFinite("class embedding table".into()));
        }
        let c = names.len();
        Ok(Self {
            w,
            names,
            kappa,
            update_counts: vec![0; c],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.w.rows()
    }

    pub fn dim(&self) -> usize {
        self.w.cols()
    }

    /// `w_c <- κ w_c + (1-κ) mean_c` for every class with a mean; classes
    /// without one are unchanged.
    pub fn ema_update(&mut self, means: &[Option<Vec<f64>>]) -> Result<()> {
        if means.len() != self.num_classes() {
            return Err(Error::dim("ema_update", &[means.len()], self.w.shape()));
        }
        let k = self.kappa;
        for (c, mean) in means.iter().enumerate() {
            let Some(mean) = mean else { continue };
            if mean.len() != self.dim() {
                return Err(Error::dim("ema_update", &[mean.len()], self.w.shape()));
            }
            for (w, &m) in self.w.row_mut(c).iter_mut().zip(mean) {
                // Clamping absorbs rounding so the result stays on the segment.
                *w = (k * *w + (1.0 - k) * m).clamp(w.min(m), w.max(m));
            }
            self.update_counts[c] += 1;
        }
        Ok(())
    }
}

/// Per-class means of `features` rows; `None` for classes without rows.
pub fn class_means(
    features: &Tensor,
    labels: &[usize],
    num_classes: usize,
) -> Vec<Option<Vec<f64>>> {
    let d = features.cols();
    let mut sums = vec![vec![0.0; d]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(features.row(i)) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect()
}

/// Table initialized to the per-class mean of the projected visual features.
/// A zero mean is nudged by `1e-6`-scale seeded noise so cosines stay defined.
pub fn init_class_embeddings(
    features: &Tensor,
    labels: &[usize],
    names: Vec<String>,
    kappa: f64,
    seed: u64,
) -> Result<ClassEmbeddingTable> {
    let c = names.len();
    if labels.len() != features.rows() {
        return Err(Error::dim(
            "init_class_embeddings",
            features.shape(),
            &[labels.len()],
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Contract(format!("label {bad} outside {c} classes")));
    }
    let means = class_means(features, labels, c);
    let mut rows = Vec::with_capacity(c);
    let mut r = rng::stream(seed, "prototype-nudge");
    for (k, m) in means.into_iter().enumerate() {
        let Some(mut m) = m else {
            return Err(Error::Contract(format!(
                "class {} has no visual samples",
                names[k]
            )));
        };
        if norm(&m) == 0.0 {
            log::warn!("prototype for {} initialized at zero; perturbing", names[k]);
            m = rng::gaussian_vec(&mut r, m.len(), 1e-6);
        }
        rows.push(m);
    }
    ClassEmbeddingTable::new(Tensor::from_rows(&rows)?, names, kappa)
}

/// Projection heads and the class table, stored together in `classes.ckpt`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassArtifacts {
    pub heads: ProjectionHeads,
    pub table: ClassEmbeddingTable,
}

fn write_mlp(w: &mut CheckpointWriter, prefix: &str, m: &Mlp) {
    for (name, t) in ["w1", "b1", "w2", "b2"].iter().zip(m.tensors()) {
        w.blob(&format!("{prefix}.{name}"), t);
    }
}

fn read_mlp(r: &mut CheckpointReader, prefix: &str) -> Result<Mlp> {
    Ok(Mlp {
        w1: r.blob(&format!("{prefix}.w1"))?,
        b1: r.blob(&format!("{prefix}.b1"))?,
        w2: r.blob(&format!("{prefix}.w2"))?,
        b2: r.blob(&format!("{prefix}.b2"))?,
    })
}

impl ClassArtifacts {
    pub fn to_bytes(&self) -> Vec<u8> {
        let t = &self.table;
        let mut w = CheckpointWriter::new(MAGIC, VERSION);
        w.u32(t.num_classes() as u32)
            .u32(t.dim() as u32)
            .u32(self.heads.vis.input_dim() as u32)
            .u32(self.heads.text.input_dim() as u32)
            .f64(t.kappa)
            .blob("W", &t.w);
        write_mlp(&mut w, "G_vis", &self.heads.vis);
        write_mlp(&mut w, "G_text", &self.heads.text);
        for (name, count) in t.names.iter().zip(&t.update_counts) {
            w.str(name).u32(*count);
        }
        w.finish()
    }

    /// CRC32 of the serialized heads and table; pairs downstream artifacts.
    pub fn checksum(&self) -> u32 {
        ckpt::trailer_crc(&self.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = CheckpointReader::open(bytes, MAGIC, path)?;
        let c = r.u32()? as usize;
        let d = r.u32()? as usize;
        let d_v = r.u32()? as usize;
        let d_t = r.u32()? as usize;
        let kappa = r.f64()?;
        let w = r.blob("W")?;
        let vis = read_mlp(&mut r, "G_vis")?;
        let text = read_mlp(&mut r, "G_text")?;
        let mut names = Vec::with_capacity(c);
        let mut counts = Vec::with_capacity(c);
        for _ in 0..c {
            names.push(r.string()?);
            counts.push(r.u32()?);
        }
        r.finish()?;
        let bad = |reason: &str| Error::Format {
            path: path.into(),
            reason: reason.into(),
        };
        if w.shape() != [c, d] {
            return Err(bad("prototype table shape disagrees with header"));
        }
        if vis.input_dim() != d_v
            || text.input_dim() != d_t
            || vis.output_dim() != d
            || text.output_dim() != d
        {
            return Err(bad("projection head shapes disagree with header"));
        }
        let mut table = ClassEmbeddingTable::new(w, names, kappa)?;
        table.update_counts = counts;
        Ok(Self {
            heads: ProjectionHeads { vis, text },
            table,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        ckpt::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&ckpt::read_file(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn table(kappa: f64) -> ClassEmbeddingTable {
        let w = Tensor::matrix(2, 3, vec![1.0, -1.0, 0.5, 0.0, 2.0, 1.0]).unwrap();
        ClassEmbeddingTable::new(w, vec!["a".into(), "b".into()], kappa).unwrap()
    }

    #[test]
    fn kappa_one_is_a_fixpoint() {
        let mut t = table(1.0);
        let before = t.w.clone();
        t.ema_update(&[Some(vec![9.0; 3]), Some(vec![-9.0; 3])])
            .unwrap();
        assert_eq!(t.w, before);
    }

    #[test]
    fn kappa_zero_replaces() {
        let mut t = table(0.0);
        t.ema_update(&[Some(vec![9.0; 3]), None]).unwrap();
        assert_eq!(t.w.row(0), &[9.0; 3]);
        assert_eq!(t.w.row(1), &[0.0, 2.0, 1.0]);
        assert_eq!(t.update_counts, vec![1, 0]);
    }

    #[test]
    fn default_kappa_scalar_case() {
        let mut t = ClassEmbeddingTable::new(
            Tensor::matrix(1, 1, vec![0.0]).unwrap(),
            vec!["a".into()],
            0.95,
        )
        .unwrap();
        t.ema_update(&[Some(vec![1.0])]).unwrap();
        assert!((t.w.item() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn init_takes_class_means() {
        let f = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0]).unwrap();
        let t =
            init_class_embeddings(&f, &[0, 0, 1], vec!["a".into(), "b".into()], 0.95, 0).unwrap();
        assert_eq!(t.w.data(), &[2.0, 3.0, -1.0, 0.0]);
    }

    #[test]
    fn antipodal_init_is_nudged() {
        let f = Tensor::matrix(2, 2, vec![1.0, 1.0, -1.0, -1.0]).unwrap();
        let t = init_class_embeddings(&f, &[0, 0], vec!["a".into()], 0.95, 0).unwrap();
        assert!(norm(t.w.row(0)) > 0.0 && norm(t.w.row(0)) < 1e-4);
    }

    #[test]
    fn missing_class_is_an_error() {
        let f = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        assert!(init_class_embeddings(&f, &[0], vec!["a".into(), "b".into()], 0.95, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let art = ClassArtifacts {
            heads: ProjectionHeads::init(3, 4, 3, 1),
            table: table(0.95),
        };
        let bytes = art.to_bytes();
        let back = ClassArtifacts::from_bytes(&bytes, Path::new("classes.ckpt")).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(matches!(
            ClassArtifacts::from_bytes(&bad, Path::new("x")),
            Err(Error::Checksum { .. })
        ));
    }

    proptest! {
        #[test]
        fn ema_stays_on_segment(
            kappa in 0.0f64..=1.0,
            w0 in proptest::collection::vec(-5.0f64..5.0, 4),
            m in proptest::collection::vec(-5.0f64..5.0, 4),
        ) {
            let mut t = ClassEmbeddingTable::new(Tensor::matrix(1, 4, w0.clone()).unwrap(), vec!["a".into()], kappa).unwrap();
            t.ema_update(&[Some(m.clone())]).unwrap();
            for j in 0..4 {
                let (lo, hi) = (w0[j].min(m[j]), w0[j].max(m[j]));
                prop_assert!(t.w.data()[j] >= lo && t.w.data()[j] <= hi);
            }
        }
    }
}
