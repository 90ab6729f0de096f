//! Quick consistency checks of the core math against naive re-derivations,
//! run by `gemb selfcheck`. Each check is small enough to finish in well
//! under a second.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{Encoder, EncoderConfig, TokenSequence};
use crate::error::Result;
use crate::io::checkpoint::Checkpoint;
use crate::io::tokenizer::{detokenize, ByteTokenizer};
use crate::loss::{duplicate_mask, mrl_loss_graph, nce_from_scores, BatchVars, DuplicateMask, LossConfig};
use crate::metrics::{mrr_at_k, ndcg_at_k, recall_at_k};
use crate::retrieval::build_index;
use crate::soup::soup;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = if self.passed { "ok" } else { "FAIL" };
        write!(f, "{status:<5}{:<14}{}", self.name, self.detail)
    }
}

fn result(name: &'static str, r: Result<(bool, String)>) -> CheckResult {
    match r {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

pub fn run_all(seed: u64) -> Vec<CheckResult> {
    vec![
        result("nce", check_nce(seed)),
        result("mask", check_mask(seed)),
        result("gradient", check_gradient(seed)),
        result("search", check_search(seed)),
        result("metrics", check_metrics(seed)),
        result("soup", check_soup(seed)),
        result("checkpoint", check_checkpoint(seed)),
        result("tokenizer", check_tokenizer(seed)),
    ]
}

fn check_nce(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let b = rng.gen_range(1..=6);
        let tau = [0.05, 0.5, 1.0][rng.gen_range(0..3)];
        let s: Vec<f64> = (0..b * b).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pos: Vec<f64> = (0..b).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let hard: Option<Vec<f64>> = rng.gen_bool(0.5).then(|| (0..b).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let keep: Vec<bool> = (0..b * b).map(|k| k / b != k % b && rng.gen_bool(0.7)).collect();
        let mask = DuplicateMask::from_fn(b, |i, j| keep[i * b + j]);
        let got = nce_from_scores(&pos, &Tensor::matrix(b, b, s.clone())?, hard.as_deref(), &mask, tau)?;
        let mut want = 0.0;
        for i in 0..b {
            let mut den = (pos[i] / tau).exp();
            if let Some(h) = &hard {
                den += (h[i] / tau).exp();
            }
            for j in 0..b {
                if keep[i * b + j] {
                    den += (s[i * b + j] / tau).exp();
                }
            }
            want += -((pos[i] / tau).exp() / den).ln();
        }
        worst = worst.max((got - want / b as f64).abs());
    }
    Ok((worst <= 1e-9, format!("max abs error {worst:.2e} over 50 batches")))
}

fn check_mask(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    for _ in 0..50 {
        let b = rng.gen_range(1..=8);
        let q: Vec<u64> = (0..b).map(|_| rng.gen_range(0..4)).collect();
        let p: Vec<u64> = (0..b).map(|_| rng.gen_range(0..4)).collect();
        let m = duplicate_mask(&q, &p)?;
        for i in 0..b {
            for j in 0..b {
                let want = !(i == j || q[i] == q[j] || p[i] == p[j]);
                if m.get(i, j) != want {
                    return Ok((false, format!("entry ({i},{j}) differs")));
                }
            }
        }
    }
    Ok((true, "50 batches match".into()))
}

fn check_gradient(seed: u64) -> Result<(bool, String)> {
    let cfg = EncoderConfig {
        vocab_size: 30,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 8,
        max_seq_len: 6,
        d_out: 4,
        mrl_dims: vec![2, 4],
    };
    let enc = Encoder::init(cfg.clone(), seed)?;
    let seqs: Vec<TokenSequence> = [vec![11, 12, 13], vec![14, 15], vec![16, 17, 18, 19], vec![20, 21]]
        .into_iter()
        .map(|ids| TokenSequence::new(ids, &cfg))
        .collect::<Result<_>>()?;
    let mask = DuplicateMask::from_fn(2, |i, j| i != j);
    let loss_cfg = LossConfig::new(0.5, cfg.mrl_dims.clone());
    let eval = |enc: &Encoder, grads: bool| -> Result<(f64, Option<BTreeMap<String, Tensor>>)> {
        let mut g = Graph::new();
        let vars = enc.bind(&mut g, grads);
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let e = enc.embed_graph(&mut g, &vars, &refs)?;
        let bv = BatchVars {
            queries: g.slice_rows(e, 0, 2)?,
            positives: g.slice_rows(e, 2, 4)?,
            hard_negatives: None,
        };
        let l = mrl_loss_graph(&mut g, &bv, &mask, &loss_cfg)?;
        let value = g.value(l).item()?;
        if !grads {
            return Ok((value, None));
        }
        let mut gr = g.backward(l)?;
        let map = vars
            .iter()
            .map(|(n, v)| (n.clone(), gr.take(*v).unwrap_or_else(|| Tensor::zeros(g.value(*v).shape().to_vec()))))
            .collect();
        Ok((value, Some(map)))
    };
    let (_, grads) = eval(&enc, true)?;
    let grads = grads.expect("requested");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
    let names: Vec<String> = enc.params.names().cloned().collect();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let name = &names[rng.gen_range(0..names.len())];
        let n = enc.params.get(name)?.len();
        let idx = rng.gen_range(0..n);
        let mut plus = enc.clone();
        plus.params.get_mut(name).expect("exists").data_mut()[idx] += h;
        let mut minus = enc.clone();
        minus.params.get_mut(name).expect("exists").data_mut()[idx] -= h;
        let fd = (eval(&plus, false)?.0 - eval(&minus, false)?.0) / (2.0 * h);
        let an = grads[name].data()[idx];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok((worst <= 1e-4, format!("max relative error {worst:.2e} over 20 coordinates")))
}

fn check_search(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
    for _ in 0..20 {
        let n = rng.gen_range(1..=60);
        let m = rng.gen_range(2..=6);
        // coarse integer grid makes exact ties common
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| loop {
                let r: Vec<f64> = (0..m).map(|_| rng.gen_range(-2..=2) as f64).collect();
                if r.iter().any(|&v| v != 0.0) {
                    break r;
                }
            })
            .collect();
        let ids: Vec<String> = (0..n).map(|i| format!("doc{:02}", (i * 7) % 100)).collect();
        let n = ids.len();
        let idx = build_index(ids.clone(), &Tensor::from_rows(&rows[..n])?)?;
        let q: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k = rng.gen_range(1..=n + 2);
        let hits = idx.search(&q, k)?;
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut brute: Vec<(f64, &String)> = (0..n)
            .map(|r| {
                let row = idx.matrix().row(r);
                (row.iter().zip(&q).map(|(a, b)| a * b / qn).sum::<f64>(), &idx.ids()[r])
            })
            .collect();
        brute.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
        let want: Vec<&String> = brute.iter().take(k.min(n)).map(|x| x.1).collect();
        let got: Vec<&String> = hits.iter().map(|h| &h.id).collect();
        if want != got {
            return Ok((false, format!("ranking differs for N={n}, k={k}")));
        }
    }
    Ok((true, "20 indexes match brute force".into()))
}

fn check_metrics(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 4);
    let docs: Vec<String> = (0..20).map(|i| format!("d{i}")).collect();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mut ranking: Vec<&str> = docs.iter().map(String::as_str).collect();
        for i in (1..ranking.len()).rev() {
            ranking.swap(i, rng.gen_range(0..=i));
        }
        let mut grades = BTreeMap::new();
        grades.insert(ranking[rng.gen_range(0..20)].to_string(), rng.gen_range(1..=3));
        for d in &docs {
            if rng.gen_bool(0.2) {
                grades.insert(d.clone(), rng.gen_range(0..=3));
            }
        }
        let k = rng.gen_range(1..=25);
        let relevant: HashSet<&str> = grades.iter().filter(|(_, &g)| g > 0).map(|(d, _)| d.as_str()).collect();
        let top = &ranking[..k.min(ranking.len())];
        let r_want = top.iter().filter(|d| relevant.contains(*d)).count() as f64 / relevant.len() as f64;
        let m_want = top.iter().position(|d| relevant.contains(d)).map_or(0.0, |p| 1.0 / (p + 1) as f64);
        let dcg: f64 = top
            .iter()
            .enumerate()
            .map(|(i, d)| *grades.get(*d).unwrap_or(&0) as f64 / (i as f64 + 2.0).log2())
            .sum();
        let mut ideal: Vec<u32> = grades.values().copied().collect();
        ideal.sort_by(|a, b| b.cmp(a));
        let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, &g)| g as f64 / (i as f64 + 2.0).log2()).sum();
        worst = worst
            .max((recall_at_k(&ranking, &relevant, k)? - r_want).abs())
            .max((mrr_at_k(&ranking, &relevant, k)? - m_want).abs())
            .max((ndcg_at_k(&ranking, &grades, k)? - dcg / idcg).abs());
    }
    Ok((worst <= 1e-12, format!("max abs error {worst:.2e} over 100 rankings")))
}

fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 20,
        d_model: 4,
        n_layers: 1,
        n_heads: 1,
        d_ff: 4,
        max_seq_len: 4,
        d_out: 2,
        mrl_dims: vec![2],
    }
}

fn check_soup(seed: u64) -> Result<(bool, String)> {
    let cfg = tiny_config();
    let cks: Vec<Checkpoint> = (0..3)
        .map(|i| Encoder::init(cfg.clone(), seed + i).map(Checkpoint::from))
        .collect::<Result<_>>()?;
    let w = [1.0, 2.0, 3.0];
    let s = soup(&[(&cks[0], w[0]), (&cks[1], w[1]), (&cks[2], w[2])])?;
    let mut worst = 0.0f64;
    for (name, t) in s.params.iter() {
        for (i, &v) in t.data().iter().enumerate() {
            let want: f64 = (0..3).map(|c| w[c] * cks[c].params.get(name).expect("same names").data()[i]).sum::<f64>() / 6.0;
            worst = worst.max((v - want).abs());
        }
    }
    let same = soup(&[(&cks[0].narrowed(), 1.0), (&cks[0].narrowed(), 1.0)])? == cks[0].narrowed();
    Ok((worst <= 1e-15 && same, format!("max abs error {worst:.2e}, self-soup identity {same}")))
}

fn check_checkpoint(seed: u64) -> Result<(bool, String)> {
    let ck = Checkpoint::from(Encoder::init(tiny_config(), seed)?);
    let bytes = ck.to_bytes()?;
    let back = Checkpoint::from_bytes(&bytes, std::path::Path::new("<memory>"))?;
    let again = back.to_bytes()?;
    Ok((bytes == again && back == ck.narrowed(), format!("{} bytes round-tripped", bytes.len())))
}

fn check_tokenizer(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 5);
    let tok = ByteTokenizer::new(256);
    for _ in 0..200 {
        let len = rng.gen_range(1..40);
        let s: String = (0..len).map(|_| rng.gen_range(' '..='\u{3ff}')).collect();
        let ids = tok.tokenize(&s)?;
        if ids.len() > 256 {
            continue;
        }
        if detokenize(ids.ids()) != s {
            return Ok((false, format!("round trip failed for {s:?}")));
        }
    }
    Ok((true, "200 strings round-tripped".into()))
}
