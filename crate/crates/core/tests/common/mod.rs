//! Straight-line reference implementation of the model on nested vectors,
//! written independently of the autodiff graph.

#![allow(dead_code)]

use rdrsr_core::model::{inventory, Model, ModelDims, ModelOptions};
use rdrsr_core::Pooling;

pub type Mat = Vec<Vec<f64>>;

pub fn small_dims(items: usize, users: usize, d: usize, t: usize, k: usize) -> ModelDims {
    ModelDims {
        items,
        users,
        d,
        t,
        k,
        num_blocks: 2,
        attn_hidden: d,
        policy_hidden: d,
    }
}

pub fn small_model(dims: ModelDims, seed: u64) -> Model {
    Model::init(dims, ModelOptions::default(), seed)
}

/// Fills every bias with small deterministic values. Zero biases put rows
/// that no ReLU activates exactly on a kink, where finite differences
/// disagree with any one-sided derivative convention.
pub fn jitter_biases(m: &mut Model, seed: u64) {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    for (name, _, _, is_bias) in inventory(&m.dims) {
        if !is_bias {
            continue;
        }
        let id = m.store.id(&name).unwrap();
        for v in m.store.get_mut(id).data_mut() {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            *v = ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 0.2;
        }
    }
}

pub fn param(m: &Model, name: &str) -> Mat {
    let t = m.store.get(m.store.id(name).unwrap());
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

pub fn vecmat(v: &[f64], b: &Mat) -> Vec<f64> {
    mm(&vec![v.to_vec()], b).remove(0)
}

pub fn dotv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn addv(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scalev(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

/// Naive softmax: no max subtraction.
pub fn softmax_naive(x: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    softmax_naive(&x.iter().map(|v| v - m).collect::<Vec<_>>())
}

/// Attention with padding keys dropped from the softmax entirely.
pub fn attention(e: &Mat, wq: &Mat, wk: &Mat, wv: &Mat, real: &[bool]) -> (Mat, Mat) {
    let d = e[0].len() as f64;
    let q = mm(e, wq);
    let k = mm(e, wk);
    let v = mm(e, wv);
    let any_real = real.iter().any(|&r| r);
    let mut weights = Vec::new();
    let mut out = Vec::new();
    for qi in &q {
        let keys: Vec<usize> = (0..e.len()).filter(|&j| real[j] || !any_real).collect();
        let logits: Vec<f64> = keys.iter().map(|&j| dotv(qi, &k[j]) / d.sqrt()).collect();
        let a = softmax(&logits);
        let mut w = vec![0.0; e.len()];
        let mut row = vec![0.0; v[0].len()];
        for (&j, aj) in keys.iter().zip(&a) {
            w[j] = *aj;
            row = addv(&row, &scalev(&v[j], *aj));
        }
        weights.push(w);
        out.push(row);
    }
    (out, weights)
}

pub fn ffn(s: &Mat, w1: &Mat, b1: &[f64], w2: &Mat, b2: &[f64]) -> Mat {
    s.iter()
        .map(|row| {
            let h: Vec<f64> = addv(&vecmat(row, w1), b1).into_iter().map(|x| x.max(0.0)).collect();
            addv(&vecmat(&h, w2), b2)
        })
        .collect()
}

pub struct Encoded {
    pub e: Mat,
    pub f: Mat,
    pub user: Vec<f64>,
    pub real: Vec<bool>,
}

pub fn encode(m: &Model, window: &[usize], user: usize) -> Encoded {
    let item = param(m, "item_emb");
    let pos = param(m, "pos_emb");
    let e: Mat = window.iter().enumerate().map(|(i, &id)| addv(&item[id], &pos[i])).collect();
    let real: Vec<bool> = window.iter().map(|&i| i != 0).collect();
    let mut x = e.clone();
    for b in 0..m.dims.num_blocks {
        let p = |n: &str| param(m, &format!("block{b}.{n}"));
        let (s, _) = attention(&x, &p("w_q"), &p("w_k"), &p("w_v"), &real);
        x = ffn(&s, &p("w_1"), &p("b_1")[0], &p("w_2"), &p("b_2")[0]);
    }
    Encoded {
        e,
        f: x,
        user: param(m, "user_emb")[user].clone(),
        real,
    }
}

/// Count distribution `f` (not logged).
pub fn count_probs(m: &Model, enc: &Encoded) -> Vec<f64> {
    let wf1 = param(m, "did.w_f1");
    let wu = param(m, "did.w_u");
    let wf2 = param(m, "did.w_f2");
    let b = param(m, "did.b")[0][0];
    let wc = param(m, "did.w_count");
    let uh = vecmat(&enc.user, &wu);
    let any_real = enc.real.iter().any(|&r| r);
    let pos: Vec<usize> = (0..enc.f.len()).filter(|&i| enc.real[i] || !any_real).collect();
    let scores: Vec<f64> = pos
        .iter()
        .map(|&i| vecmat(&addv(&vecmat(&enc.f[i], &wf1), &uh), &wf2)[0] + b)
        .collect();
    let a = softmax(&scores);
    let mut pooled = vec![0.0; enc.f[0].len()];
    for (&i, ai) in pos.iter().zip(&a) {
        pooled = addv(&pooled, &scalev(&enc.f[i], *ai));
    }
    let raw: Vec<f64> = vecmat(&pooled, &wc).into_iter().map(|x| x.clamp(-30.0, 30.0)).collect();
    softmax(&raw)
}

/// Policy distribution over the first `h` slots.
pub fn policy_probs(m: &Model, s: &[f64], h: usize) -> Vec<f64> {
    let w1 = param(m, "policy.w_1");
    let b1 = param(m, "policy.b_1")[0].clone();
    let w2 = param(m, "policy.w_2");
    let b2 = param(m, "policy.b_2")[0].clone();
    let hid: Vec<f64> = addv(&vecmat(s, &w1), &b1).into_iter().map(|x| x.max(0.0)).collect();
    let logits = addv(&vecmat(&hid, &w2), &b2);
    softmax(&logits[..h])
}

pub fn next_state(m: &Model, reps: &[Vec<f64>], x: &[f64], z: &[f64]) -> Vec<f64> {
    let alpha = softmax(&reps.iter().map(|p| dotv(p, x)).collect::<Vec<_>>());
    let mut att = vec![0.0; x.len()];
    for (p, a) in reps.iter().zip(&alpha) {
        att = addv(&att, &scalev(p, *a));
    }
    let mut cat = att;
    cat.extend_from_slice(x);
    cat.extend_from_slice(z);
    vecmat(&cat, &param(m, "state.w_0"))
}

pub struct OracleWindow {
    pub f: Vec<f64>,
    pub z: Vec<f64>,
    pub h: usize,
    pub reps: Vec<Vec<f64>>,
    /// Allocation steps then the target-selection step.
    pub log_probs: Vec<f64>,
    pub actions: Vec<usize>,
    pub r_c: f64,
    pub r_baseline: f64,
    pub r_orth: f64,
    pub r_s: f64,
    pub ce: f64,
    pub rl: f64,
    pub loss: f64,
}

/// Full window with scripted actions (one per real item plus one for target
/// selection) and given Gumbel noise. `fixed_h` bypasses the count head.
#[allow(clippy::too_many_arguments)]
pub fn window(
    m: &Model,
    user: usize,
    input: &[usize],
    target: usize,
    negatives: &[usize],
    noise: &[f64],
    fixed_h: Option<usize>,
    actions: &[usize],
    lambda_o: f64,
    beta: f64,
) -> OracleWindow {
    let k = m.dims.k;
    let enc = encode(m, input, user);
    let (f, z, h) = match fixed_h {
        Some(h) => {
            let mut oh = vec![0.0; k];
            oh[h - 1] = 1.0;
            (oh.clone(), oh, h)
        }
        None => {
            let f = count_probs(m, &enc);
            let x: Vec<f64> = f.iter().zip(noise).map(|(p, g)| p.ln() + g).collect();
            let mut h = 0;
            for i in 1..k {
                if x[i] > x[h] {
                    h = i;
                }
            }
            let z = softmax(&x.iter().map(|v| v / m.options.temperature).collect::<Vec<_>>());
            (f, z, h + 1)
        }
    };
    let mut reps = vec![enc.user.clone(); h];
    let mut counts = vec![1.0; h];
    let mut log_probs = Vec::new();
    let mut used = Vec::new();
    let mut it = actions.iter();
    for (pos, row) in enc.f.iter().enumerate() {
        if !enc.real[pos] {
            continue;
        }
        let s = next_state(m, &reps, row, &z);
        let pi = policy_probs(m, &s, h);
        let a = *it.next().expect("enough scripted actions");
        log_probs.push(pi[a].ln());
        used.push(a);
        reps[a] = match m.options.pooling {
            Pooling::Running => scalev(&addv(&scalev(&reps[a], counts[a]), row), 1.0 / (counts[a] + 1.0)),
            Pooling::Pairwise => scalev(&addv(&reps[a], row), 0.5),
        };
        counts[a] += 1.0;
    }
    let item = param(m, "item_emb");
    let e_t = item[target].clone();
    let s = next_state(m, &reps, &e_t, &z);
    let pi = policy_probs(m, &s, h);
    let a = *it.next().expect("target action");
    log_probs.push(pi[a].ln());
    used.push(a);
    let pool: Vec<Vec<f64>> = std::iter::once(target).chain(negatives.iter().copied()).map(|i| item[i].clone()).collect();
    let score = |p: &[f64]| softmax(&pool.iter().map(|e| dotv(p, e)).collect::<Vec<_>>())[0];
    let r_c = score(&reps[a]);
    let r_baseline = reps.iter().map(|p| score(p)).sum::<f64>() / h as f64;
    let mut r_orth = 0.0;
    if h > 1 {
        let mut pairs = 0.0;
        for i in 0..h {
            for j in i + 1..h {
                r_orth -= dotv(&reps[i], &reps[j]).abs();
                pairs += 1.0;
            }
        }
        r_orth /= pairs;
    }
    let r_s = r_c - r_baseline + lambda_o * r_orth;
    let ce = -r_c.ln();
    let rl = -r_s * log_probs.iter().sum::<f64>();
    OracleWindow {
        f,
        z,
        h,
        reps,
        log_probs,
        actions: used,
        r_c,
        r_baseline,
        r_orth,
        r_s,
        ce,
        rl,
        loss: ce + beta * rl,
    }
}

fn argmax_low(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Prediction-time scores: zero noise, greedy allocation, greedy routing of
/// each candidate, inner product with the routed representation.
pub fn greedy_scores(m: &Model, user: usize, input: &[usize], candidates: &[usize]) -> Vec<f64> {
    let k = m.dims.k;
    let enc = encode(m, input, user);
    let (z, h) = match m.options.fixed_h {
        Some(h) => {
            let mut oh = vec![0.0; k];
            oh[h - 1] = 1.0;
            (oh, h)
        }
        None => {
            let f = count_probs(m, &enc);
            let h = argmax_low(&f) + 1;
            let z = softmax(&f.iter().map(|p| p.ln() / m.options.temperature).collect::<Vec<_>>());
            (z, h)
        }
    };
    let mut reps = vec![enc.user.clone(); h];
    let mut counts = vec![1.0; h];
    for (pos, row) in enc.f.iter().enumerate() {
        if !enc.real[pos] {
            continue;
        }
        let a = argmax_low(&policy_probs(m, &next_state(m, &reps, row, &z), h));
        reps[a] = scalev(&addv(&scalev(&reps[a], counts[a]), row), 1.0 / (counts[a] + 1.0));
        counts[a] += 1.0;
    }
    let item = param(m, "item_emb");
    candidates
        .iter()
        .map(|&c| {
            let a = argmax_low(&policy_probs(m, &next_state(m, &reps, &item[c], &z), h));
            dotv(&reps[a], &item[c])
        })
        .collect()
}
