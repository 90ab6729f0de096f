//! Acceptance suite: one pass/fail line per criterion. Oracles here are
//! written from the definitions, not from the library code paths.

use std::collections::{BTreeMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use gemb::encoder::{Encoder, EncoderConfig, TokenSequence};
use gemb::io::checkpoint::Checkpoint;
use gemb::io::config::RunConfig;
use gemb::loss::{
    content_key, duplicate_mask, mrl_loss, mrl_loss_graph, nce_from_scores, nce_loss, BatchEmbeddings, BatchVars,
    DuplicateMask, LossConfig,
};
use gemb::metrics::{evaluate, mrr_at_k, ndcg_at_k, recall_at_k, relevant_set, MetricSpec};
use gemb::pipeline::{self, ConvergenceRun};
use gemb::retrieval::build_index;
use gemb::soup::soup;
use gemb::tensor::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gauss(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---- oracles ----

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// `-log(e^{s+/τ} / (e^{s+/τ} + e^{s-/τ} + Σ_j mask_ij e^{s_ij/τ}))` averaged over rows.
fn nce_oracle(pos: &[f64], s: &[Vec<f64>], hard: Option<&[f64]>, mask: &[Vec<bool>], tau: f64) -> f64 {
    let b = pos.len();
    let mut total = 0.0;
    for i in 0..b {
        let num = (pos[i] / tau).exp();
        let mut den = num;
        if let Some(h) = hard {
            den += (h[i] / tau).exp();
        }
        for j in 0..b {
            if mask[i][j] {
                den += (s[i][j] / tau).exp();
            }
        }
        total += -(num / den).ln();
    }
    total / b as f64
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (n, _) = t.dims2().unwrap();
    (0..n).map(|i| t.row(i).to_vec()).collect()
}

/// Loss on raw embedding rows, cosine similarities computed here.
fn batch_oracle(q: &[Vec<f64>], p: &[Vec<f64>], h: Option<&[Vec<f64>]>, mask: &[Vec<bool>], tau: f64) -> f64 {
    let b = q.len();
    let pos: Vec<f64> = (0..b).map(|i| cos(&q[i], &p[i])).collect();
    let s: Vec<Vec<f64>> = (0..b).map(|i| (0..b).map(|j| cos(&q[i], &p[j])).collect()).collect();
    let hard: Option<Vec<f64>> = h.map(|h| (0..b).map(|i| cos(&q[i], &h[i])).collect());
    nce_oracle(&pos, &s, hard.as_deref(), mask, tau)
}

fn prefix(v: &[Vec<f64>], m: usize) -> Vec<Vec<f64>> {
    v.iter().map(|r| r[..m].to_vec()).collect()
}

fn mask_oracle(q: &[String], p: &[String]) -> Vec<Vec<bool>> {
    let b = q.len();
    let mut m = vec![vec![true; b]; b];
    for i in 0..b {
        for j in 0..b {
            if i == j || q[i] == q[j] || p[i] == p[j] {
                m[i][j] = false;
            }
        }
    }
    m
}

fn random_batch(rng: &mut ChaCha8Rng, b: usize, d: usize, hard: bool) -> (BatchEmbeddings, Vec<String>, Vec<String>) {
    let pool = ["w0", "w1", "w2", "w3", "w4", "w5", "w6", "w7", "w8", "w9"];
    let qt: Vec<String> = (0..b).map(|_| pool.choose(rng).unwrap().to_string()).collect();
    let pt: Vec<String> = (0..b).map(|_| format!("p{}", pool.choose(rng).unwrap())).collect();
    let batch = BatchEmbeddings {
        queries: Tensor::matrix(b, d, gauss(rng, b * d)).unwrap(),
        positives: Tensor::matrix(b, d, gauss(rng, b * d)).unwrap(),
        hard_negatives: hard.then(|| Tensor::matrix(b, d, gauss(rng, b * d)).unwrap()),
        query_keys: qt.iter().map(|t| content_key(t)).collect(),
        positive_keys: pt.iter().map(|t| content_key(t)).collect(),
    };
    (batch, qt, pt)
}

// ---- criteria ----

fn c1_loss_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for n in 0..200 {
        let b = rng.gen_range(1..=8);
        let tau = [0.01, 0.05, 1.0][n % 3];
        let with_hard = n % 2 == 0;
        let u = |rng: &mut ChaCha8Rng| rng.gen_range(-1.0..=1.0);
        let pos: Vec<f64> = (0..b).map(|_| u(&mut rng)).collect();
        let s: Vec<Vec<f64>> = (0..b).map(|_| (0..b).map(|_| u(&mut rng)).collect()).collect();
        let hard: Option<Vec<f64>> = with_hard.then(|| (0..b).map(|_| u(&mut rng)).collect());
        let mask: Vec<Vec<bool>> = (0..b).map(|_| (0..b).map(|_| rng.gen_bool(0.6)).collect()).collect();
        let flat: Vec<f64> = s.iter().flatten().copied().collect();
        let dm = DuplicateMask::from_fn(b, |i, j| mask[i][j]);
        let got = nce_from_scores(&pos, &Tensor::matrix(b, b, flat).unwrap(), hard.as_deref(), &dm, tau)
            .map_err(|e| e.to_string())?;
        let want = nce_oracle(&pos, &s, hard.as_deref(), &mask, tau);
        worst = worst.max((got - want).abs());
    }
    let t = start.elapsed();
    ensure(
        worst <= 1e-9 && t < Duration::from_secs(5),
        format!("200 configurations, max abs error {worst:.2e}, {:.2} s", secs(t)),
    )
}

fn c2_mask() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut planted = 0;
    for _ in 0..100 {
        let b = rng.gen_range(2..=12);
        let mut q: Vec<String> = (0..b).map(|i| format!("query {i} {}", rng.gen::<u32>())).collect();
        let mut p: Vec<String> = (0..b).map(|i| format!("passage {i} {}", rng.gen::<u32>())).collect();
        // plant at least one duplicated query and one duplicated positive
        for _ in 0..rng.gen_range(1..=3) {
            let (i, j) = (rng.gen_range(0..b), rng.gen_range(0..b));
            q[j] = q[i].clone();
            let (i, j) = (rng.gen_range(0..b), rng.gen_range(0..b));
            p[j] = p[i].clone();
            planted += 2;
        }
        let qk: Vec<u64> = q.iter().map(|t| content_key(t)).collect();
        let pk: Vec<u64> = p.iter().map(|t| content_key(t)).collect();
        let got = duplicate_mask(&qk, &pk).map_err(|e| e.to_string())?;
        let want = mask_oracle(&q, &p);
        for i in 0..b {
            for j in 0..b {
                if got.get(i, j) != want[i][j] {
                    return Err(format!("batch of {b}: entry ({i},{j}) is {} want {}", got.get(i, j), want[i][j]));
                }
            }
        }
    }
    Ok(format!("100 batches, {planted} planted duplicates, exact"))
}

fn c3_gradient() -> Outcome {
    let start = Instant::now();
    let cfg = EncoderConfig {
        vocab_size: 40,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 8,
        d_out: 8,
        mrl_dims: vec![4, 8],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut enc = Encoder::init(cfg.clone(), 303).map_err(|e| e.to_string())?;
    // move away from the tiny-init regime so every block carries signal
    for (_, t) in enc.params.iter_mut() {
        for v in t.data_mut() {
            *v += 0.3 * gauss(&mut rng, 1)[0];
        }
    }
    // queries 0..2, positives 2..4, hard negatives 4..6
    let mut used = HashSet::new();
    let seqs: Vec<TokenSequence> = (0..6)
        .map(|_| {
            let len = rng.gen_range(2..=cfg.max_seq_len);
            let ids: Vec<u32> = (0..len).map(|_| rng.gen_range(0..cfg.vocab_size as u32)).collect();
            used.extend(ids.iter().copied());
            TokenSequence::new(ids, &cfg).unwrap()
        })
        .collect();
    let mask = DuplicateMask::from_fn(2, |i, j| i != j);
    let loss_cfg = LossConfig::new(0.05, cfg.mrl_dims.clone());
    let loss = |enc: &Encoder, grads: bool| -> (f64, Option<BTreeMap<String, Tensor>>) {
        let mut g = Graph::new();
        let vars = enc.bind(&mut g, grads);
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let e = enc.embed_graph(&mut g, &vars, &refs).unwrap();
        let bv = BatchVars {
            queries: g.slice_rows(e, 0, 2).unwrap(),
            positives: g.slice_rows(e, 2, 4).unwrap(),
            hard_negatives: Some(g.slice_rows(e, 4, 6).unwrap()),
        };
        let l = mrl_loss_graph(&mut g, &bv, &mask, &loss_cfg).unwrap();
        let value = g.value(l).item().unwrap();
        if !grads {
            return (value, None);
        }
        let mut gr = g.backward(l).unwrap();
        let map = vars
            .iter()
            .map(|(n, v)| (n.clone(), gr.take(*v).unwrap_or_else(|| Tensor::zeros(g.value(*v).shape().to_vec()))))
            .collect();
        (value, Some(map))
    };
    let grads = loss(&enc, true).1.unwrap();
    let names: Vec<String> = enc.params.names().cloned().collect();
    let used: Vec<u32> = used.into_iter().collect();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let name = names.choose(&mut rng).unwrap();
        let t = enc.params.get(name).unwrap();
        let idx = if name == "token_embedding" {
            // rows of unused tokens have an identically zero gradient
            let row = *used.choose(&mut rng).unwrap() as usize;
            row * cfg.d_model + rng.gen_range(0..cfg.d_model)
        } else {
            rng.gen_range(0..t.len())
        };
        let mut plus = enc.clone();
        plus.params.get_mut(name).unwrap().data_mut()[idx] += h;
        let mut minus = enc.clone();
        minus.params.get_mut(name).unwrap().data_mut()[idx] -= h;
        let fd = (loss(&plus, false).0 - loss(&minus, false).0) / (2.0 * h);
        let an = grads[name].data()[idx];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    let t = start.elapsed();
    ensure(
        worst <= 1e-4 && t < Duration::from_secs(60),
        format!("100 coordinates, max relative error {worst:.2e}, {:.2} s", secs(t)),
    )
}

fn c4_mrl() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    // (a) a single full-width prefix is plain NCE
    for _ in 0..20 {
        let d = 8;
        let (b, hard) = (rng.gen_range(1..=6), rng.gen_bool(0.5));
        let (batch, _, _) = random_batch(&mut rng, b, d, hard);
        let cfg = LossConfig::new(0.05, vec![d]);
        let (a, b) = (mrl_loss(&batch, &cfg).unwrap(), nce_loss(&batch, &cfg).unwrap());
        if a != b {
            return Err(format!("(a) mrl {a} vs nce {b}"));
        }
    }
    // (b) zero tail beyond the smallest prefix
    let mut worst_b = 0.0f64;
    for _ in 0..20 {
        let (mut batch, _, _) = random_batch(&mut rng, 4, 8, true);
        for t in [&mut batch.queries, &mut batch.positives, batch.hard_negatives.as_mut().unwrap()] {
            for r in 0..4 {
                t.data_mut()[r * 8 + 2..r * 8 + 8].fill(0.0);
            }
        }
        let cfg = LossConfig::new(0.05, vec![2, 4, 8]);
        let full = nce_loss(&batch, &cfg).unwrap();
        let total = mrl_loss(&batch, &cfg).unwrap();
        let m = key_mask_oracle(&batch);
        for p in [2, 4, 8] {
            let l = batch_oracle(
                &prefix(&rows(&batch.queries), p),
                &prefix(&rows(&batch.positives), p),
                Some(&prefix(&rows(batch.hard_negatives.as_ref().unwrap()), p)),
                &m,
                0.05,
            );
            worst_b = worst_b.max((l - full).abs());
        }
        worst_b = worst_b.max((total - full).abs());
    }
    if worst_b > 1e-12 {
        return Err(format!("(b) zero-tail deviation {worst_b:.2e}"));
    }
    // (c) slice each prefix and evaluate from scratch
    let mut worst_c = 0.0f64;
    for n in 0..50 {
        let d = 16;
        let b = rng.gen_range(1..=8);
        let (batch, qt, pt) = random_batch(&mut rng, b, d, n % 2 == 0);
        let dims = vec![4, 8, 16];
        let tau = [0.01, 0.05, 1.0][n % 3];
        let got = mrl_loss(&batch, &LossConfig::new(tau, dims.clone())).unwrap();
        let mask = mask_oracle(&qt, &pt);
        let hn = batch.hard_negatives.as_ref().map(rows);
        let want = dims
            .iter()
            .map(|&m| {
                batch_oracle(
                    &prefix(&rows(&batch.queries), m),
                    &prefix(&rows(&batch.positives), m),
                    hn.as_ref().map(|h| prefix(h, m)).as_deref(),
                    &mask,
                    tau,
                )
            })
            .sum::<f64>()
            / dims.len() as f64;
        worst_c = worst_c.max((got - want).abs());
    }
    ensure(
        worst_c <= 1e-9,
        format!("(a) exact on 20 batches, (b) max deviation {worst_b:.2e}, (c) max abs error {worst_c:.2e} on 50 batches"),
    )
}

fn key_mask_oracle(batch: &BatchEmbeddings) -> Vec<Vec<bool>> {
    let b = batch.query_keys.len();
    (0..b)
        .map(|i| {
            (0..b)
                .map(|j| i != j && batch.query_keys[i] != batch.query_keys[j] && batch.positive_keys[i] != batch.positive_keys[j])
                .collect()
        })
        .collect()
}

fn c5_retrieval() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut ties = 0;
    for _ in 0..100 {
        let n = rng.gen_range(1..=200);
        let d = rng.gen_range(2..=16);
        let mut data = gauss(&mut rng, n * d);
        // plant exact ties by copying rows under different ids
        for _ in 0..rng.gen_range(0..=n / 4) {
            let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
            let src: Vec<f64> = data[a * d..(a + 1) * d].to_vec();
            data[b * d..(b + 1) * d].copy_from_slice(&src);
            ties += 1;
        }
        let mut ids: Vec<String> = (0..n).map(|i| format!("doc{:04}", (i * 37 + 11) % 10007)).collect();
        ids.shuffle(&mut rng);
        let index = build_index(ids.clone(), &Tensor::matrix(n, d, data.clone()).unwrap()).map_err(|e| e.to_string())?;
        let query = if rng.gen_bool(0.3) {
            data[rng.gen_range(0..n) * d..][..d].to_vec()
        } else {
            gauss(&mut rng, d)
        };
        let k = rng.gen_range(1..=n + 3);
        let got = index.search(&query, k).map_err(|e| e.to_string())?;

        let unit = |v: &[f64]| -> Vec<f64> {
            let norm = dot(v, v).sqrt();
            v.iter().map(|x| x / norm).collect()
        };
        let qn = unit(&query);
        let mut all: Vec<(f64, String)> =
            (0..n).map(|r| (dot(&unit(&data[r * d..(r + 1) * d]), &qn), ids[r].clone())).collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
        all.truncate(k.min(n));
        if got.len() != all.len() {
            return Err(format!("N={n} k={k}: {} hits, want {}", got.len(), all.len()));
        }
        for (r, (h, (s, id))) in got.iter().zip(&all).enumerate() {
            if h.id != *id || h.score != *s {
                return Err(format!("N={n} rank {r}: got ({}, {}) want ({id}, {s})", h.id, h.score));
            }
        }
    }
    Ok(format!("100 indexes, {ties} planted ties, ids and scores exact"))
}

fn c6_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let n_docs = rng.gen_range(1..=30);
        let docs: Vec<String> = (0..n_docs).map(|i| format!("d{i}")).collect();
        let mut grades = BTreeMap::new();
        for d in &docs {
            if rng.gen_bool(0.3) {
                grades.insert(d.clone(), rng.gen_range(0..=3u32));
            }
        }
        let forced = docs.choose(&mut rng).unwrap().clone();
        grades.insert(forced, rng.gen_range(1..=3));
        let mut order = docs.clone();
        order.shuffle(&mut rng);
        order.truncate(rng.gen_range(1..=n_docs));
        let ranking: Vec<&str> = order.iter().map(String::as_str).collect();
        let k = rng.gen_range(1..=n_docs + 2);

        let rel = |d: &str| grades.get(d).copied().unwrap_or(0);
        let n_rel = grades.values().filter(|&&g| g > 0).count() as f64;
        let top = &ranking[..k.min(ranking.len())];
        let recall = top.iter().filter(|d| rel(d) > 0).count() as f64 / n_rel;
        let mut mrr = 0.0;
        for (i, d) in top.iter().enumerate() {
            if rel(d) > 0 {
                mrr = 1.0 / (i as f64 + 1.0);
                break;
            }
        }
        let mut dcg = 0.0;
        for (i, d) in top.iter().enumerate() {
            dcg += rel(d) as f64 / (i as f64 + 2.0).log2();
        }
        let mut ideal: Vec<u32> = grades.values().copied().collect();
        ideal.sort_by(|a, b| b.cmp(a));
        let mut idcg = 0.0;
        for (i, g) in ideal.iter().take(k).enumerate() {
            idcg += *g as f64 / (i as f64 + 2.0).log2();
        }

        let relevant = relevant_set(&grades);
        let got = [
            recall_at_k(&ranking, &relevant, k).unwrap(),
            mrr_at_k(&ranking, &relevant, k).unwrap(),
            ndcg_at_k(&ranking, &grades, k).unwrap(),
        ];
        for (g, w) in got.iter().zip([recall, mrr, dcg / idcg]) {
            worst = worst.max((g - w).abs());
        }
    }
    let grades: BTreeMap<String, u32> = [("a".to_string(), 1)].into();
    let rank2 = ndcg_at_k(&["x", "a"], &grades, 10).unwrap();
    let want = 1.0 / 3f64.log2();
    ensure(
        worst <= 1e-12 && (rank2 - want).abs() <= 1e-12 && (rank2 - 0.63093).abs() < 1e-5,
        format!("500 rankings, max abs error {worst:.2e}; rank-2 NDCG {rank2:.6}"),
    )
}

fn c7_soup() -> Outcome {
    let cfg = EncoderConfig {
        vocab_size: 40,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 8,
        d_out: 4,
        mrl_dims: vec![2, 4],
    };
    let ck = |seed| Checkpoint::from(Encoder::init(cfg.clone(), seed).unwrap());
    let dir = tempfile::tempdir().unwrap();

    // identity after a round trip
    let a = ck(1);
    a.save(dir.path().join("a.ckpt")).unwrap();
    let a_rt = Checkpoint::load(dir.path().join("a.ckpt")).unwrap();
    let s = soup(&[(&a_rt, 1.0), (&a_rt, 1.0)]).unwrap();
    s.save(dir.path().join("s.ckpt")).unwrap();
    let same_bytes = std::fs::read(dir.path().join("a.ckpt")).unwrap() == std::fs::read(dir.path().join("s.ckpt")).unwrap();
    let same_values = s.params.iter().zip(a_rt.params.iter()).all(|((_, x), (_, y))| {
        x.data().iter().zip(y.data()).all(|(u, v)| u.to_bits() == v.to_bits())
    });
    if !(same_bytes && same_values) {
        return Err("soup(θ, θ) is not θ".into());
    }

    // two-input weighted cases: (w1 a + w2 b) / (w1 + w2) exactly
    let b = ck(2);
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut checked = 0usize;
    for _ in 0..20 {
        let (w1, w2) = (rng.gen_range(0.05..5.0), rng.gen_range(0.05..5.0));
        let s = soup(&[(&a, w1), (&b, w2)]).unwrap();
        for ((name, t), (_, u)) in a.params.iter().zip(b.params.iter()) {
            let got = s.params.get(name).unwrap();
            for i in 0..t.len() {
                let want = (w1 * t.data()[i] + w2 * u.data()[i]) / (w1 + w2);
                if got.data()[i].to_bits() != want.to_bits() {
                    return Err(format!("{name}[{i}]: {} vs oracle {want}", got.data()[i]));
                }
                checked += 1;
            }
        }
    }

    // three inputs on a dyadic grid, where every partial sum is exact
    let grid = |seed: u64| {
        let mut c = ck(seed);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        for (_, t) in c.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-512i32..512) as f64 / 1024.0);
        }
        c
    };
    let (g1, g2, g3) = (grid(11), grid(12), grid(13));
    let s3 = soup(&[(&g1, 3.0), (&g2, 1.0), (&g3, 2.0)]).unwrap();
    for (name, t) in s3.params.iter() {
        let (x, y, z) = (g1.params.get(name).unwrap(), g2.params.get(name).unwrap(), g3.params.get(name).unwrap());
        for i in 0..t.len() {
            let want = (3.0 * x.data()[i] + y.data()[i] + 2.0 * z.data()[i]) / 6.0;
            if t.data()[i].to_bits() != want.to_bits() {
                return Err(format!("three-way {name}[{i}] differs"));
            }
        }
    }

    // invariances
    let c = ck(3);
    let r21 = soup(&[(&a, 2.0), (&b, 1.0)]).unwrap();
    let r42 = soup(&[(&a, 4.0), (&b, 2.0)]).unwrap();
    let perm1 = soup(&[(&a, 0.7), (&b, 1.9), (&c, 0.4)]).unwrap();
    let perm2 = soup(&[(&c, 0.4), (&a, 0.7), (&b, 1.9)]).unwrap();
    let perm3 = soup(&[(&b, 1.9), (&c, 0.4), (&a, 0.7)]).unwrap();
    ensure(
        r21 == r42 && perm1 == perm2 && perm1 == perm3,
        format!("identity bitwise, {checked} weighted coordinates exact, scale and permutation invariant"),
    )
}

fn c8_determinism() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let path = pipeline::write_demo(dir.path(), 7, 300, 300).map_err(|e| e.to_string())?;
    let cfg = RunConfig::load(&path).map_err(|e| e.to_string())?;
    let run = || -> (Vec<u8>, String) {
        let enc = pipeline::train_from_config(&cfg, None, &mut |_| Ok(())).unwrap();
        let bytes = Checkpoint::from(enc).to_bytes().unwrap();
        let reloaded = Checkpoint::from_bytes(&bytes, &path).unwrap().into_encoder().unwrap();
        let reports = pipeline::evaluate_binding(&reloaded, cfg.eval.as_ref().unwrap(), false).unwrap();
        (bytes, pipeline::reports_json(&reports))
    };
    let (c1, r1) = run();
    let (c2, r2) = run();
    let t = start.elapsed();
    ensure(
        c1 == c2 && r1 == r2 && t < Duration::from_secs(600),
        format!(
            "two runs of 300+300 steps: checkpoints {} bytes {}, reports {}, {:.0} s",
            c1.len(),
            if c1 == c2 { "identical" } else { "DIFFER" },
            if r1 == r2 { "identical" } else { "DIFFER" },
            secs(t)
        ),
    )
}

const CONVERGENCE_STEPS: usize = 1000;

fn c9_convergence(run: &ConvergenceRun, t: Duration) -> Outcome {
    let r1 = run.metric("recall@1", None, false).map_err(|e| e.to_string())?;
    let mrr = run.metric("mrr@10", None, false).map_err(|e| e.to_string())?;

    // Monte-Carlo baseline: random embeddings through the same index and metrics
    let data = &run.data;
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let d = run.encoder.config.d_out;
    let doc_ids: Vec<String> = data.corpus.iter().map(|r| r.id.clone()).collect();
    let q_ids: Vec<String> = data.queries.iter().map(|r| r.id.clone()).collect();
    let spec: MetricSpec = "recall@1".parse().unwrap();
    let trials = 200;
    let mut sum = 0.0;
    for _ in 0..trials {
        let docs = Tensor::matrix(doc_ids.len(), d, gauss(&mut rng, doc_ids.len() * d)).unwrap();
        let qs = Tensor::matrix(q_ids.len(), d, gauss(&mut rng, q_ids.len() * d)).unwrap();
        let index = build_index(doc_ids.clone(), &docs).unwrap();
        sum += evaluate(&index, &q_ids, &qs, &data.qrels, &[spec]).unwrap()[0].mean;
    }
    let baseline = sum / trials as f64;
    let chance = 1.0 / data.corpus.len() as f64;
    ensure(
        data.corpus.len() == 128
            && run.steps <= 2000
            && r1 >= 0.9
            && mrr >= 0.93
            && (baseline - chance).abs() < 0.003
            && t < Duration::from_secs(600),
        format!(
            "{} steps: Recall@1 {r1:.4}, MRR@10 {mrr:.4}; random baseline {baseline:.4} vs 1/128 = {chance:.4}; {:.0} s",
            run.steps,
            secs(t)
        ),
    )
}

fn c10_mrl_ordering(run: &ConvergenceRun) -> Outcome {
    let sweep = run.mrl_sweep().map_err(|e| e.to_string())?;
    let vals: Vec<f64> = sweep.iter().map(|(_, v)| *v).collect();
    let dims: Vec<usize> = sweep.iter().map(|(d, _)| *d).collect();
    let text = sweep.iter().map(|(d, v)| format!("dim {d} {v:.4}")).collect::<Vec<_>>().join(", ");
    ensure(
        dims == [16, 32, 64] && vals[0] <= vals[1] && vals[1] <= vals[2] && vals[0] >= 0.5,
        format!("Recall@1 {text}"),
    )
}

fn c11_soup_ablation() -> Outcome {
    let start = Instant::now();
    let r = pipeline::soup_ablation_scenario(0).map_err(|e| e.to_string())?;
    let ft = r.row("fine-tuned").unwrap();
    let s11 = r.row("soup 1:1").unwrap();
    let (s21, s42) = (r.row("soup 2:1").unwrap(), r.row("soup 4:2").unwrap());
    let base = r.row("base").unwrap();
    ensure(
        ft.delta_a > 0.0
            && s11.delta_a > 0.0
            && s11.delta_b >= ft.delta_b
            && base.delta_a == 0.0
            && base.delta_b == 0.0
            && s21.domain_a == s42.domain_a
            && s21.domain_b == s42.domain_b,
        format!(
            "NDCG@10 deltas: fine-tuned dA {:+.4} dB {:+.4}; soup 1:1 dA {:+.4} dB {:+.4}; {:.0} s",
            ft.delta_a,
            ft.delta_b,
            s11.delta_a,
            s11.delta_b,
            secs(start.elapsed())
        ),
    )
}

fn c12_task_strings(run: &ConvergenceRun) -> Outcome {
    let (with, without) = run.task_string_gap().map_err(|e| e.to_string())?;
    let gap = with - without;
    // reported only, no bound
    let plain = pipeline::convergence_run(0, CONVERGENCE_STEPS, 0.0).map_err(|e| e.to_string())?;
    let (w0, wo0) = plain.task_string_gap().map_err(|e| e.to_string())?;
    ensure(
        gap <= 0.10,
        format!(
            "p=0.2: Recall@1 {with:.4} with task strings, {without:.4} without (gap {gap:+.4}); p=0: gap {:+.4}",
            w0 - wo0
        ),
    )
}

fn main() {
    // the libtest harness is off, but keep `--list` style invocations cheap
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut results: Vec<(usize, &str, Outcome, Duration)> = Vec::new();
    let mut check = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let t = start.elapsed();
        let (tag, detail) = match &out {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} {n:>2} {name}: {detail} [{:.1} s]", secs(t));
        results.push((n, name, out, t));
    };

    check(1, "loss oracle equivalence", &mut c1_loss_oracle);
    check(2, "mask brute force", &mut c2_mask);
    check(3, "gradient check", &mut c3_gradient);
    check(4, "MRL properties", &mut c4_mrl);
    check(5, "retrieval oracle", &mut c5_retrieval);
    check(6, "metric oracles", &mut c6_metrics);
    check(7, "soup algebra", &mut c7_soup);
    check(8, "determinism", &mut c8_determinism);

    let start = Instant::now();
    let converged = catch_unwind(|| pipeline::convergence_run(0, CONVERGENCE_STEPS, 0.2));
    let train_time = start.elapsed();
    match converged {
        Ok(Ok(run)) => {
            check(9, "convergence", &mut || c9_convergence(&run, train_time));
            check(10, "MRL utility ordering", &mut || c10_mrl_ordering(&run));
            check(11, "soup ablation pattern", &mut c11_soup_ablation);
            check(12, "task-string robustness", &mut || c12_task_strings(&run));
        }
        other => {
            let msg = match other {
                Ok(Err(e)) => e.to_string(),
                _ => "training panicked".into(),
            };
            check(9, "convergence", &mut || Err(msg.clone()));
            check(10, "MRL utility ordering", &mut || Err("no converged model".into()));
            check(11, "soup ablation pattern", &mut c11_soup_ablation);
            check(12, "task-string robustness", &mut || Err("no converged model".into()));
        }
    }

    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!("{}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
