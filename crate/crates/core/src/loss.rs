//! Contrastive objective: cosine similarity, the duplicate mask over in-batch
//! negatives, the masked NCE loss and its Matryoshka (nested prefix) wrapper.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::validate_mrl_dims;
use crate::error::{Error, Result};
use crate::tensor::{kernels, nce_row, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    pub mrl_dims: Vec<usize>,
}

fn default_temperature() -> f64 {
    0.05
}

impl LossConfig {
    pub fn new(temperature: f64, mrl_dims: Vec<usize>) -> Self {
        LossConfig {
            temperature,
            mrl_dims,
        }
    }

    pub fn validate(&self, d_out: usize) -> Result<()> {
        check_tau(self.temperature)?;
        validate_mrl_dims(&self.mrl_dims, d_out)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Hash of raw example text used for duplicate detection.
pub fn content_key(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn cosine_sim(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim("cosine_sim", format!("{} vs {}", x.len(), y.len())));
    }
    let nx = kernels::dot(x, x).sqrt();
    let ny = kernels::dot(y, y).sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::Domain("cosine similarity of a zero vector".into()));
    }
    Ok(kernels::dot(x, y) / (nx * ny))
}

/// B×B indicator of which in-batch terms enter the denominator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DuplicateMask {
    size: usize,
    include: Vec<bool>,
}

impl DuplicateMask {
    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let include = (0..size * size).map(|k| f(k / size, k % size)).collect();
        DuplicateMask { size, include }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.include[i * self.size + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.include
    }
}

/// Entry (i, j) is 0 when row i and row j share a query or a positive, else 1.
/// The diagonal is always 0.
pub fn duplicate_mask(query_keys: &[u64], positive_keys: &[u64]) -> Result<DuplicateMask> {
    if query_keys.len() != positive_keys.len() {
        return Err(Error::dim(
            "duplicate_mask",
            format!("{} query keys vs {} positive keys", query_keys.len(), positive_keys.len()),
        ));
    }
    Ok(DuplicateMask::from_fn(query_keys.len(), |i, j| {
        query_keys[i] != query_keys[j] && positive_keys[i] != positive_keys[j]
    }))
}

/// Masked in-batch NCE loss from precomputed similarity scores, averaged over
/// the batch. The hard-negative term is dropped when `hard_scores` is `None`.
pub fn nce_from_scores(
    pos_scores: &[f64],
    inbatch_scores: &Tensor,
    hard_scores: Option<&[f64]>,
    mask: &DuplicateMask,
    tau: f64,
) -> Result<f64> {
    check_tau(tau)?;
    let b = pos_scores.len();
    if b == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    if inbatch_scores.dims2()? != (b, b) || mask.size() != b {
        return Err(Error::dim("nce_from_scores", format!("batch {b}")));
    }
    if hard_scores.is_some_and(|h| h.len() != b) {
        return Err(Error::dim("nce_from_scores", "hard-negative scores length"));
    }
    let mut weights = vec![0.0; b];
    let mut total = 0.0;
    for i in 0..b {
        let row = nce_row(
            pos_scores[i],
            hard_scores.map(|h| h[i]),
            inbatch_scores.row(i),
            &mask.as_slice()[i * b..(i + 1) * b],
            tau,
            &mut weights,
        );
        total += row.loss;
    }
    Ok(total / b as f64)
}

/// Query, positive and optional hard-negative embeddings for one batch, with
/// content keys of the raw query and positive text.
#[derive(Clone, Debug)]
pub struct BatchEmbeddings {
    pub queries: Tensor,
    pub positives: Tensor,
    pub hard_negatives: Option<Tensor>,
    pub query_keys: Vec<u64>,
    pub positive_keys: Vec<u64>,
}

impl BatchEmbeddings {
    pub fn validate(&self) -> Result<(usize, usize)> {
        let (b, d) = self.queries.dims2()?;
        if self.positives.dims2()? != (b, d) {
            return Err(Error::dim("batch", "positives shape differs from queries"));
        }
        if let Some(h) = &self.hard_negatives {
            if h.dims2()? != (b, d) {
                return Err(Error::dim("batch", "hard negatives shape differs from queries"));
            }
        }
        if self.query_keys.len() != b || self.positive_keys.len() != b {
            return Err(Error::dim("batch", "key count differs from batch size"));
        }
        Ok((b, d))
    }

    pub fn mask(&self) -> Result<DuplicateMask> {
        duplicate_mask(&self.query_keys, &self.positive_keys)
    }

    fn bind(&self, g: &mut Graph) -> BatchVars {
        BatchVars {
            queries: g.constant(self.queries.clone()),
            positives: g.constant(self.positives.clone()),
            hard_negatives: self.hard_negatives.clone().map(|h| g.constant(h)),
        }
    }
}

/// Batch embeddings living on a graph.
#[derive(Clone, Copy, Debug)]
pub struct BatchVars {
    pub queries: Var,
    pub positives: Var,
    pub hard_negatives: Option<Var>,
}

/// Differentiable masked NCE loss over all pairwise cosine similarities.
pub fn nce_loss_graph(g: &mut Graph, vars: &BatchVars, mask: &DuplicateMask, tau: f64) -> Result<Var> {
    let q = g.normalize_rows(vars.queries)?;
    let p = g.normalize_rows(vars.positives)?;
    let pt = g.transpose(p)?;
    let scores = g.matmul(q, pt)?;
    let hard = match vars.hard_negatives {
        Some(h) => {
            let h = g.normalize_rows(h)?;
            Some(g.rows_dot(q, h)?)
        }
        None => None,
    };
    g.masked_nce(scores, hard, mask.as_slice(), tau)
}

/// Unweighted mean of the NCE loss evaluated on each nested prefix.
pub fn mrl_loss_graph(
    g: &mut Graph,
    vars: &BatchVars,
    mask: &DuplicateMask,
    cfg: &LossConfig,
) -> Result<Var> {
    check_tau(cfg.temperature)?;
    let (_, d) = g.value(vars.queries).dims2()?;
    if cfg.mrl_dims.is_empty() {
        return Err(Error::Config("mrl_dims is empty".into()));
    }
    if let Some(&m) = cfg.mrl_dims.iter().find(|&&m| m == 0 || m > d) {
        return Err(Error::Config(format!("prefix {m} invalid for embedding width {d}")));
    }
    let mut total: Option<Var> = None;
    for &m in &cfg.mrl_dims {
        let sliced = if m == d {
            *vars
        } else {
            BatchVars {
                queries: g.slice_cols(vars.queries, 0, m)?,
                positives: g.slice_cols(vars.positives, 0, m)?,
                hard_negatives: match vars.hard_negatives {
                    Some(h) => Some(g.slice_cols(h, 0, m)?),
                    None => None,
                },
            }
        };
        let l = nce_loss_graph(g, &sliced, mask, cfg.temperature)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    let total = total.expect("non-empty dims");
    Ok(g.scale(total, 1.0 / cfg.mrl_dims.len() as f64))
}

pub fn nce_loss(batch: &BatchEmbeddings, cfg: &LossConfig) -> Result<f64> {
    batch.validate()?;
    let mut g = Graph::new();
    let vars = batch.bind(&mut g);
    let out = nce_loss_graph(&mut g, &vars, &batch.mask()?, cfg.temperature)?;
    g.value(out).item()
}

pub fn mrl_loss(batch: &BatchEmbeddings, cfg: &LossConfig) -> Result<f64> {
    batch.validate()?;
    let mut g = Graph::new();
    let vars = batch.bind(&mut g);
    let out = mrl_loss_graph(&mut g, &vars, &batch.mask()?, cfg)?;
    g.value(out).item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn distinct(b: usize) -> DuplicateMask {
        let keys: Vec<u64> = (0..b as u64).collect();
        duplicate_mask(&keys, &keys).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_sim(&[0.3, -2.0], &[0.3, -2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // 11 / (sqrt(5) * 5)
        let want = 11.0 / (5f64.sqrt() * 5.0);
        assert!((cosine_sim(&[1.0, 2.0], &[3.0, 4.0]).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.98387).abs() < 1e-5);
        assert!(matches!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn mask_examples() {
        let m = distinct(3);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.get(i, j), i != j);
            }
        }
        // rows 1 and 2 carry the same label as positive
        let m = duplicate_mask(&[10, 11, 12], &[7, 8, 8]).unwrap();
        assert!(!m.get(1, 2) && !m.get(2, 1));
        assert!(m.get(0, 1) && m.get(0, 2));
        assert_eq!(distinct(1).as_slice(), &[false]);
    }

    #[test]
    fn nce_examples() {
        let one = Tensor::from_rows(&[vec![0.37]]).unwrap();
        let l = nce_from_scores(&[0.37], &one, None, &distinct(1), 0.05).unwrap();
        assert_eq!(l, 0.0);
        let l = nce_from_scores(&[0.37], &one, Some(&[0.37]), &distinct(1), 0.05).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);

        let s = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap();
        let l = nce_from_scores(&[0.9, 0.9], &s, None, &distinct(2), 1.0).unwrap();
        let want = (1.0 + (-0.8f64).exp()).ln();
        assert!((l - want).abs() < 1e-12);
        assert!((want - 0.37110).abs() < 1e-5);
        assert!(matches!(
            nce_from_scores(&[0.9, 0.9], &s, None, &distinct(2), 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn stable_at_small_temperature() {
        let s = Tensor::from_rows(&[vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap();
        let l = nce_from_scores(&[-1.0, -1.0], &s, Some(&[1.0, 1.0]), &distinct(2), 0.01).unwrap();
        assert!(l.is_finite());
        assert!(l > 199.0);
    }

    fn rand_batch(rng: &mut ChaCha8Rng, b: usize, d: usize, hard: bool) -> BatchEmbeddings {
        let mut t = |rows| {
            Tensor::new(vec![rows, d], (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap()
        };
        let queries = t(b);
        let positives = t(b);
        let hard_negatives = hard.then(|| t(b));
        BatchEmbeddings {
            queries,
            positives,
            hard_negatives,
            query_keys: (0..b as u64).collect(),
            positive_keys: (100..100 + b as u64).collect(),
        }
    }

    #[test]
    fn identical_pair_loss_is_zero() {
        let q = Tensor::from_rows(&[vec![0.2, 0.5, -1.0]]).unwrap();
        let batch = BatchEmbeddings {
            queries: q.clone(),
            positives: q,
            hard_negatives: None,
            query_keys: vec![1],
            positive_keys: vec![2],
        };
        assert_eq!(nce_loss(&batch, &LossConfig::new(0.05, vec![3])).unwrap(), 0.0);
    }

    #[test]
    fn scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = rand_batch(&mut rng, 4, 6, true);
        let cfg = LossConfig::new(0.1, vec![6]);
        let mut scaled = batch.clone();
        for t in [&mut scaled.queries, &mut scaled.positives] {
            t.data_mut().iter_mut().for_each(|v| *v *= 5.0);
        }
        let a = nce_loss(&batch, &cfg).unwrap();
        let b = nce_loss(&scaled, &cfg).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn mrl_rejects_oversized_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = rand_batch(&mut rng, 2, 4, false);
        assert!(matches!(
            mrl_loss(&batch, &LossConfig::new(0.05, vec![2, 8])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_norm_embedding_is_domain_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut batch = rand_batch(&mut rng, 2, 4, false);
        batch.positives.data_mut()[..4].fill(0.0);
        assert!(matches!(
            nce_loss(&batch, &LossConfig::new(0.05, vec![4])),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn mrl_gradient_beyond_smallest_prefix() {
        // Coordinates past the first prefix only enter the larger prefix terms.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch = rand_batch(&mut rng, 3, 6, false);
        let mask = batch.mask().unwrap();
        let grad_of = |dims: Vec<usize>| {
            let mut g = Graph::new();
            let q = g.param(batch.queries.clone());
            let p = g.constant(batch.positives.clone());
            let vars = BatchVars {
                queries: q,
                positives: p,
                hard_negatives: None,
            };
            let l = mrl_loss_graph(&mut g, &vars, &mask, &LossConfig::new(0.2, dims)).unwrap();
            g.backward(l).unwrap().take(q).unwrap()
        };
        let mrl = grad_of(vec![3, 6]);
        let full = grad_of(vec![6]);
        for r in 0..3 {
            for c in 3..6 {
                assert!((mrl.at(r, c) - 0.5 * full.at(r, c)).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn loss_non_negative_and_monotone(
            seed in 0u64..1000,
            b in 2usize..6,
            tau in prop::sample::select(vec![0.01, 0.05, 0.5, 1.0]),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..b * b).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s = Tensor::matrix(b, b, scores.clone()).unwrap();
            let pos: Vec<f64> = (0..b).map(|i| scores[i * b + i]).collect();
            let mask = distinct(b);
            let base = nce_from_scores(&pos, &s, None, &mask, tau).unwrap();
            prop_assert!(base >= 0.0);
            prop_assert!(base.is_finite());

            let mut up = scores.clone();
            up[1] += 0.05; // row 0, column 1, masked in
            let l = nce_from_scores(&pos, &Tensor::matrix(b, b, up).unwrap(), None, &mask, tau).unwrap();
            // non-strict: at small tau the change can sit below f64 resolution
            prop_assert!(l >= base);

            let mut pos_up = pos.clone();
            pos_up[0] += 0.05;
            let l = nce_from_scores(&pos_up, &s, None, &mask, tau).unwrap();
            prop_assert!(l <= base);
        }

        #[test]
        fn mask_relation_is_symmetric(keys in prop::collection::vec((0u64..4, 0u64..4), 1..10)) {
            let q: Vec<u64> = keys.iter().map(|k| k.0).collect();
            let p: Vec<u64> = keys.iter().map(|k| k.1).collect();
            let m = duplicate_mask(&q, &p).unwrap();
            for i in 0..q.len() {
                prop_assert!(!m.get(i, i));
                for j in 0..q.len() {
                    prop_assert_eq!(m.get(i, j), m.get(j, i));
                }
            }
        }
    }
}
