//! Forward pass, sampled-softmax loss and hand-written backward pass.

use rayon::prelude::*;

use super::{AttentionMode, AttentionScaling, Layout, ModelParams, Tensor, TrainConfig, TriggerMode, ITEM_FIELDS, QUERY_FIELDS};
use crate::features::{magnitude_bucket, recent, Candidate, FeatureStore, ScoringQuery};
use crate::sampler::TrainingSample;
use crate::ItemId;

/// Samples per gradient work unit. Fixed so the reduction order never depends
/// on the number of threads.
const GRAD_CHUNK: usize = 16;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = b + x W` with `W` stored `in x out`.
fn affine(p: &[f64], w: Tensor, b: Tensor, x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(&p[b.range()]);
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            axpy(xi, &p[w.row(i)], out);
        }
    }
}

fn affine_backward(p: &[f64], g: &mut [f64], w: Tensor, b: Tensor, x: &[f64], dout: &[f64], dx: Option<&mut [f64]>) {
    axpy(1.0, dout, &mut g[b.range()]);
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            axpy(xi, dout, &mut g[w.row(i)]);
        }
    }
    if let Some(dx) = dx {
        for (i, d) in dx.iter_mut().enumerate() {
            *d += dot(&p[w.row(i)], dout);
        }
    }
}

/// `out = x W[rows first..first+len(x)]`, the per-head projection.
fn project(p: &[f64], w: Tensor, first: usize, x: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            axpy(xi, &p[w.row(first + i)], out);
        }
    }
}

fn project_backward(p: &[f64], g: &mut [f64], w: Tensor, first: usize, x: &[f64], dout: &[f64], dx: &mut [f64]) {
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            axpy(xi, dout, &mut g[w.row(first + i)]);
        }
        dx[i] += dot(&p[w.row(first + i)], dout);
    }
}

fn relu_in_place(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Scaling applied before and after the softmax.
fn scales(cfg: &TrainConfig, dk: usize) -> (f64, f64) {
    let s = 1.0 / (dk as f64).sqrt();
    match cfg.attention_scaling {
        AttentionScaling::Logits => (s, 1.0),
        AttentionScaling::Output => (1.0, s),
    }
}

/// Single-query attention over `len` keys/values of width `dk`.
fn attend(q: &[f64], k: &[f64], v: &[f64], dk: usize, (pre, post): (f64, f64), alpha: &mut [f64], out: &mut [f64]) {
    for (t, a) in alpha.iter_mut().enumerate() {
        *a = pre * dot(q, &k[t * dk..(t + 1) * dk]);
    }
    softmax_in_place(alpha);
    out.fill(0.0);
    for (t, &a) in alpha.iter().enumerate() {
        axpy(post * a, &v[t * dk..(t + 1) * dk], out);
    }
}

#[allow(clippy::too_many_arguments)]
fn attend_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    alpha: &[f64],
    dout: &[f64],
    dk: usize,
    (pre, post): (f64, f64),
    dq: &mut [f64],
    dkeys: &mut [f64],
    dvals: &mut [f64],
) {
    let dalpha: Vec<f64> = (0..alpha.len()).map(|t| post * dot(dout, &v[t * dk..(t + 1) * dk])).collect();
    let mean: f64 = alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
    for (t, (&a, &da)) in alpha.iter().zip(&dalpha).enumerate() {
        let span = t * dk..(t + 1) * dk;
        axpy(post * a, dout, &mut dvals[span.clone()]);
        let ds = a * (da - mean);
        if ds != 0.0 {
            axpy(pre * ds, &k[span.clone()], dq);
            axpy(pre * ds, q, &mut dkeys[span]);
        }
    }
}

fn clamp_row(id: u32, t: Tensor) -> usize {
    let r = id as usize;
    if r < t.rows {
        r
    } else {
        0
    }
}

/// Embedding rows of an item's features: item, seller, brand.
fn item_rows(layout: &Layout, store: &FeatureStore, item: ItemId) -> [usize; ITEM_FIELDS] {
    let attrs = store.attrs(item);
    [
        clamp_row(item, layout.item),
        clamp_row(attrs.seller, layout.seller),
        clamp_row(attrs.brand, layout.brand),
    ]
}

fn item_tables(layout: &Layout) -> [Tensor; ITEM_FIELDS] {
    [layout.item, layout.seller, layout.brand]
}

fn add_item_feature(p: &[f64], layout: &Layout, rows: [usize; ITEM_FIELDS], scale: f64, out: &mut [f64]) {
    let d = layout.d;
    for (f, (t, r)) in item_tables(layout).into_iter().zip(rows).enumerate() {
        axpy(scale, &p[t.row(r)], &mut out[f * d..(f + 1) * d]);
    }
}

fn item_feature_backward(g: &mut [f64], layout: &Layout, rows: [usize; ITEM_FIELDS], scale: f64, dfeat: &[f64]) {
    let d = layout.d;
    for (f, (t, r)) in item_tables(layout).into_iter().zip(rows).enumerate() {
        axpy(scale, &dfeat[f * d..(f + 1) * d], &mut g[t.row(r)]);
    }
}

/// Triggers and cross-feature rows used for one candidate under the trigger mode.
#[derive(Debug, Clone)]
struct Selection {
    trigger_rows: Vec<[usize; ITEM_FIELDS]>,
    cross_rows: Vec<[usize; 4]>,
    count_row: usize,
}

fn select(layout: &Layout, store: &FeatureStore, user: u32, cand: &Candidate, mode: TriggerMode) -> Selection {
    let prov = &cand.provenance;
    let chosen: Vec<_> = match mode {
        TriggerMode::Multi => prov.iter().collect(),
        TriggerMode::SingleRandom if prov.is_empty() => Vec::new(),
        TriggerMode::SingleRandom => {
            let h = crate::seed::splitmix64((u64::from(user) << 32) | u64::from(cand.item));
            vec![&prov[(h % prov.len() as u64) as usize]]
        }
        TriggerMode::None => Vec::new(),
    };
    let cross_source: Vec<_> = if mode == TriggerMode::SingleRandom { chosen.clone() } else { prov.iter().collect() };
    Selection {
        trigger_rows: chosen.iter().map(|p| item_rows(layout, store, p.trigger)).collect(),
        cross_rows: cross_source.iter().map(|p| store.cross_buckets(cand.item, p)).collect(),
        count_row: magnitude_bucket(chosen.len() as f64),
    }
}

/// Per-query state shared by all candidates.
struct SequenceState {
    rows: Vec<[usize; ITEM_FIELDS]>,
    /// `len x F` item features.
    x: Vec<f64>,
    /// `heads x len x dk`.
    keys: Vec<f64>,
    values: Vec<f64>,
    /// Self-attention mode only: per-position queries, weights and pooled output.
    self_queries: Vec<f64>,
    self_alpha: Vec<f64>,
    pooled: Vec<f64>,
}

struct CandidateState {
    sel: Selection,
    target_rows: [usize; ITEM_FIELDS],
    z: Vec<f64>,
    query_pre: Vec<f64>,
    query_hidden: Vec<f64>,
    query: Vec<f64>,
    /// `heads x len` (target mode).
    alpha: Vec<f64>,
    /// Inputs of every output layer; `acts[0]` is the concatenated feature vector.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of the hidden output layers.
    pres: Vec<Vec<f64>>,
    logit: f64,
}

struct Forward {
    seq: SequenceState,
    cands: Vec<CandidateState>,
}

fn run_sequence(params: &ModelParams, store: &FeatureStore, query: &ScoringQuery, cfg: &TrainConfig) -> SequenceState {
    let layout = &params.layout;
    let p = &params.data;
    let (d, heads, dk) = (layout.d, layout.heads, layout.key_dim);
    let f = ITEM_FIELDS * d;
    let sequence = recent(&query.sequence, cfg.max_seq_len);
    let len = sequence.len();
    let rows: Vec<_> = sequence.iter().map(|&i| item_rows(layout, store, i)).collect();
    let mut x = vec![0.0; len * f];
    for (t, r) in rows.iter().enumerate() {
        add_item_feature(p, layout, *r, 1.0, &mut x[t * f..(t + 1) * f]);
    }
    let mut keys = vec![0.0; heads * len * dk];
    let mut values = vec![0.0; heads * len * dk];
    for h in 0..heads {
        for t in 0..len {
            let xt = &x[t * f..(t + 1) * f];
            let span = (h * len + t) * dk..(h * len + t + 1) * dk;
            project(p, layout.attn_k, h * f, xt, &mut keys[span.clone()]);
            project(p, layout.attn_v, h * f, xt, &mut values[span]);
        }
    }
    let mut seq = SequenceState {
        rows,
        x,
        keys,
        values,
        self_queries: Vec::new(),
        self_alpha: Vec::new(),
        pooled: vec![0.0; heads * dk],
    };
    if cfg.attention_mode == AttentionMode::SelfPooled && len > 0 {
        let sc = scales(cfg, dk);
        seq.self_queries = vec![0.0; heads * len * dk];
        seq.self_alpha = vec![0.0; heads * len * len];
        let mut out = vec![0.0; dk];
        for h in 0..heads {
            let kh = &seq.keys[h * len * dk..(h + 1) * len * dk];
            let vh = &seq.values[h * len * dk..(h + 1) * len * dk];
            for t in 0..len {
                let qspan = (h * len + t) * dk..(h * len + t + 1) * dk;
                project(p, layout.attn_q, h * f, &seq.x[t * f..(t + 1) * f], &mut seq.self_queries[qspan.clone()]);
                let aspan = (h * len + t) * len..(h * len + t + 1) * len;
                attend(&seq.self_queries[qspan], kh, vh, dk, sc, &mut seq.self_alpha[aspan], &mut out);
                axpy(1.0 / len as f64, &out, &mut seq.pooled[h * dk..(h + 1) * dk]);
            }
        }
    }
    seq
}

fn run_candidate(params: &ModelParams, store: &FeatureStore, user: u32, seq: &SequenceState, cand: &Candidate, cfg: &TrainConfig) -> CandidateState {
    let layout = &params.layout;
    let p = &params.data;
    let (d, heads, dk) = (layout.d, layout.heads, layout.key_dim);
    let f = ITEM_FIELDS * d;
    let len = seq.rows.len();

    let sel = select(layout, store, user, cand, cfg.trigger_mode);
    let target_rows = item_rows(layout, store, cand.item);
    let mut z = vec![0.0; QUERY_FIELDS * d];
    if !sel.trigger_rows.is_empty() {
        let w = 1.0 / sel.trigger_rows.len() as f64;
        for r in &sel.trigger_rows {
            add_item_feature(p, layout, *r, w, &mut z[..f]);
        }
    }
    add_item_feature(p, layout, target_rows, 1.0, &mut z[f..2 * f]);
    let cross = &mut z[2 * f..];
    if !sel.cross_rows.is_empty() {
        let w = 1.0 / sel.cross_rows.len() as f64;
        for buckets in &sel.cross_rows {
            for (k, &b) in buckets.iter().enumerate() {
                axpy(w, &p[layout.cross[k].row(b)], &mut cross[k * d..(k + 1) * d]);
            }
        }
    }
    axpy(1.0, &p[layout.cross[4].row(sel.count_row)], &mut cross[4 * d..5 * d]);

    let mut query_pre = Vec::new();
    let mut query = Vec::new();
    let mut alpha = Vec::new();
    let mut mha = vec![0.0; heads * dk];
    let mut query_hidden = Vec::new();
    match cfg.attention_mode {
        AttentionMode::Target => {
            affine(p, layout.query_w1, layout.query_b1, &z, &mut query_pre);
            query_hidden = query_pre.clone();
            relu_in_place(&mut query_hidden);
            affine(p, layout.query_w2, layout.query_b2, &query_hidden, &mut query);
            if len > 0 {
                let sc = scales(cfg, dk);
                alpha = vec![0.0; heads * len];
                for h in 0..heads {
                    let span = h * len * dk..(h + 1) * len * dk;
                    attend(
                        &query[h * dk..(h + 1) * dk],
                        &seq.keys[span.clone()],
                        &seq.values[span],
                        dk,
                        sc,
                        &mut alpha[h * len..(h + 1) * len],
                        &mut mha[h * dk..(h + 1) * dk],
                    );
                }
            }
        }
        AttentionMode::SelfPooled => mha.copy_from_slice(&seq.pooled),
    }

    let mut input = mha;
    input.extend_from_slice(&p[layout.user.row(clamp_row(user, layout.user))]);
    input.extend_from_slice(&z);
    let mut acts = vec![input];
    let mut pres = Vec::new();
    let mut logit = 0.0;
    let last = layout.out.len() - 1;
    for (l, (w, b)) in layout.out.iter().enumerate() {
        let mut pre = Vec::new();
        affine(p, *w, *b, &acts[l], &mut pre);
        if l == last {
            logit = pre[0];
        } else {
            let mut act = pre.clone();
            relu_in_place(&mut act);
            pres.push(pre);
            acts.push(act);
        }
    }
    CandidateState {
        sel,
        target_rows,
        z,
        query_pre,
        query_hidden,
        query,
        alpha,
        acts,
        pres,
        logit,
    }
}

fn run_forward(params: &ModelParams, store: &FeatureStore, query: &ScoringQuery, cfg: &TrainConfig) -> Forward {
    let seq = run_sequence(params, store, query, cfg);
    let cands = query
        .candidates
        .iter()
        .map(|c| run_candidate(params, store, query.user, &seq, c, cfg))
        .collect();
    Forward { seq, cands }
}

/// Accumulates into `g` the gradient of `Σ dlogits[c] * logit[c]`.
fn run_backward(params: &ModelParams, query: &ScoringQuery, cfg: &TrainConfig, fwd: &Forward, dlogits: &[f64], g: &mut [f64]) {
    let layout = &params.layout;
    let p = &params.data;
    let (d, heads, dk) = (layout.d, layout.heads, layout.key_dim);
    let f = ITEM_FIELDS * d;
    let seq = &fwd.seq;
    let len = seq.rows.len();
    let sc = scales(cfg, dk);
    let user_row = clamp_row(query.user, layout.user);

    let mut dkeys = vec![0.0; heads * len * dk];
    let mut dvalues = vec![0.0; heads * len * dk];
    let mut dpooled = vec![0.0; heads * dk];

    for (cs, &dlogit) in fwd.cands.iter().zip(dlogits) {
        if dlogit == 0.0 {
            continue;
        }
        // output MLP
        let mut dcur = vec![dlogit];
        for (l, (w, b)) in layout.out.iter().enumerate().rev() {
            let mut dprev = vec![0.0; w.rows];
            affine_backward(p, g, *w, *b, &cs.acts[l], &dcur, Some(&mut dprev));
            if l > 0 {
                for (dv, &pre) in dprev.iter_mut().zip(&cs.pres[l - 1]) {
                    if pre <= 0.0 {
                        *dv = 0.0;
                    }
                }
            }
            dcur = dprev;
        }
        let hd = heads * dk;
        let dmha = &dcur[..hd];
        axpy(1.0, &dcur[hd..hd + d], &mut g[layout.user.row(user_row)]);
        let mut dz = dcur[hd + d..].to_vec();

        match cfg.attention_mode {
            AttentionMode::Target => {
                let mut dquery = vec![0.0; hd];
                if len > 0 {
                    for h in 0..heads {
                        let span = h * len * dk..(h + 1) * len * dk;
                        attend_backward(
                            &cs.query[h * dk..(h + 1) * dk],
                            &seq.keys[span.clone()],
                            &seq.values[span.clone()],
                            &cs.alpha[h * len..(h + 1) * len],
                            &dmha[h * dk..(h + 1) * dk],
                            dk,
                            sc,
                            &mut dquery[h * dk..(h + 1) * dk],
                            &mut dkeys[span.clone()],
                            &mut dvalues[span],
                        );
                    }
                }
                let mut dhidden = vec![0.0; cs.query_hidden.len()];
                affine_backward(p, g, layout.query_w2, layout.query_b2, &cs.query_hidden, &dquery, Some(&mut dhidden));
                for (dh, &pre) in dhidden.iter_mut().zip(&cs.query_pre) {
                    if pre <= 0.0 {
                        *dh = 0.0;
                    }
                }
                affine_backward(p, g, layout.query_w1, layout.query_b1, &cs.z, &dhidden, Some(&mut dz));
            }
            AttentionMode::SelfPooled => axpy(1.0, dmha, &mut dpooled),
        }

        // feature blocks of z
        if !cs.sel.trigger_rows.is_empty() {
            let w = 1.0 / cs.sel.trigger_rows.len() as f64;
            for r in &cs.sel.trigger_rows {
                item_feature_backward(g, layout, *r, w, &dz[..f]);
            }
        }
        item_feature_backward(g, layout, cs.target_rows, 1.0, &dz[f..2 * f]);
        let dcross = &dz[2 * f..];
        if !cs.sel.cross_rows.is_empty() {
            let w = 1.0 / cs.sel.cross_rows.len() as f64;
            for buckets in &cs.sel.cross_rows {
                for (k, &b) in buckets.iter().enumerate() {
                    axpy(w, &dcross[k * d..(k + 1) * d], &mut g[layout.cross[k].row(b)]);
                }
            }
        }
        axpy(1.0, &dcross[4 * d..5 * d], &mut g[layout.cross[4].row(cs.sel.count_row)]);
    }

    if len == 0 {
        return;
    }
    let mut dx = vec![0.0; len * f];
    if cfg.attention_mode == AttentionMode::SelfPooled && dpooled.iter().any(|&v| v != 0.0) {
        let mut dq = vec![0.0; dk];
        for h in 0..heads {
            let dout: Vec<f64> = dpooled[h * dk..(h + 1) * dk].iter().map(|v| v / len as f64).collect();
            let span = h * len * dk..(h + 1) * len * dk;
            for t in 0..len {
                dq.fill(0.0);
                let qspan = (h * len + t) * dk..(h * len + t + 1) * dk;
                attend_backward(
                    &seq.self_queries[qspan],
                    &seq.keys[span.clone()],
                    &seq.values[span.clone()],
                    &seq.self_alpha[(h * len + t) * len..(h * len + t + 1) * len],
                    &dout,
                    dk,
                    sc,
                    &mut dq,
                    &mut dkeys[span.clone()],
                    &mut dvalues[span.clone()],
                );
                project_backward(p, g, layout.attn_q, h * f, &seq.x[t * f..(t + 1) * f], &dq, &mut dx[t * f..(t + 1) * f]);
            }
        }
    }
    for h in 0..heads {
        for t in 0..len {
            let span = (h * len + t) * dk..(h * len + t + 1) * dk;
            let xt = &seq.x[t * f..(t + 1) * f];
            let dxt = &mut dx[t * f..(t + 1) * f];
            project_backward(p, g, layout.attn_k, h * f, xt, &dkeys[span.clone()], dxt);
            project_backward(p, g, layout.attn_v, h * f, xt, &dvalues[span], dxt);
        }
    }
    for (t, r) in seq.rows.iter().enumerate() {
        item_feature_backward(g, layout, *r, 1.0, &dx[t * f..(t + 1) * f]);
    }
}

/// Logits of every candidate in the query.
pub fn score_query(params: &ModelParams, store: &FeatureStore, query: &ScoringQuery, cfg: &TrainConfig) -> Vec<f64> {
    let seq = run_sequence(params, store, query, cfg);
    query
        .candidates
        .iter()
        .map(|c| run_candidate(params, store, query.user, &seq, c, cfg).logit)
        .collect()
}

/// Logit of one candidate of a training sample.
pub fn forward(params: &ModelParams, store: &FeatureStore, sample: &TrainingSample, candidate: ItemId, cfg: &TrainConfig) -> f64 {
    let query = ScoringQuery {
        user: sample.user,
        sequence: sample.history.clone(),
        candidates: vec![sample.candidate(candidate)],
    };
    score_query(params, store, &query, cfg)[0]
}

/// Intermediate values exposed for inspection and testing.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryTrace {
    pub logits: Vec<f64>,
    /// Per candidate, `heads x len` attention weights (target mode).
    pub attention: Vec<Vec<f64>>,
    /// Self mode: `heads x len x len` weights.
    pub self_attention: Vec<f64>,
    /// Sign of every ReLU pre-activation, in evaluation order.
    pub relu_signs: Vec<bool>,
}

pub fn trace_query(params: &ModelParams, store: &FeatureStore, query: &ScoringQuery, cfg: &TrainConfig) -> QueryTrace {
    let fwd = run_forward(params, store, query, cfg);
    let mut relu_signs = Vec::new();
    for c in &fwd.cands {
        relu_signs.extend(c.query_pre.iter().map(|&v| v > 0.0));
        for pre in &c.pres {
            relu_signs.extend(pre.iter().map(|&v| v > 0.0));
        }
    }
    QueryTrace {
        logits: fwd.cands.iter().map(|c| c.logit).collect(),
        attention: fwd.cands.iter().map(|c| c.alpha.clone()).collect(),
        self_attention: fwd.seq.self_alpha.clone(),
        relu_signs,
    }
}

/// `-log softmax(logits)[0]` with a max shift, and the softmax itself.
pub(crate) fn softmax_loss(logits: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    // ln(sum) = ln(exps[0] + rest); ln_1p keeps precision when the positive dominates
    let rest: f64 = exps[1..].iter().sum();
    let loss = (max - logits[0]) + if max == logits[0] { rest.ln_1p() } else { sum.ln() };
    (loss, exps.into_iter().map(|e| e / sum).collect())
}

/// Sampled-softmax loss of the positive against the sample's negatives.
pub fn loss(params: &ModelParams, store: &FeatureStore, sample: &TrainingSample, cfg: &TrainConfig) -> f64 {
    softmax_loss(&score_query(params, store, &sample.to_query(), cfg)).0
}

fn accumulate(params: &ModelParams, store: &FeatureStore, samples: &[TrainingSample], cfg: &TrainConfig, g: &mut [f64]) -> f64 {
    let mut total = 0.0;
    for s in samples {
        let query = s.to_query();
        let fwd = run_forward(params, store, &query, cfg);
        let logits: Vec<f64> = fwd.cands.iter().map(|c| c.logit).collect();
        let (l, mut probs) = softmax_loss(&logits);
        probs[0] -= 1.0;
        run_backward(params, &query, cfg, &fwd, &probs, g);
        total += l;
    }
    total
}

/// Mean loss over the batch and its exact gradient, shaped like the parameters.
pub fn grad(params: &ModelParams, store: &FeatureStore, batch: &[TrainingSample], cfg: &TrainConfig) -> (f64, Vec<f64>) {
    let n = params.data.len();
    if batch.is_empty() {
        return (0.0, vec![0.0; n]);
    }
    let (mut loss_sum, mut g) = if batch.len() <= GRAD_CHUNK {
        let mut g = vec![0.0; n];
        let l = accumulate(params, store, batch, cfg, &mut g);
        (l, g)
    } else {
        let parts: Vec<(f64, Vec<f64>)> = batch
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut g = vec![0.0; n];
                let l = accumulate(params, store, chunk, cfg, &mut g);
                (l, g)
            })
            .collect();
        let mut parts = parts.into_iter();
        let (mut l, mut g) = parts.next().expect("non-empty batch");
        for (pl, pg) in parts {
            l += pl;
            axpy(1.0, &pg, &mut g);
        }
        (l, g)
    };
    let scale = 1.0 / batch.len() as f64;
    loss_sum *= scale;
    for v in &mut g {
        *v *= scale;
    }
    (loss_sum, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Provenance;
    use crate::model::Vocabulary;
    use std::collections::BTreeMap;

    fn cfg() -> TrainConfig {
        TrainConfig {
            embedding_dim: 4,
            heads: 2,
            key_dim: 3,
            query_hidden: 5,
            out_hidden: vec![6, 4],
            ..TrainConfig::default()
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary { items: 12, users: 3, sellers: 2, brands: 2 }
    }

    fn sample() -> TrainingSample {
        let prov = |t: u32, r: u32| Provenance { trigger: t, rank: r, score: 0.3 / r as f64 };
        let mut trigger_of = BTreeMap::new();
        trigger_of.insert(7, vec![prov(2, 1), prov(3, 4)]);
        trigger_of.insert(8, vec![prov(2, 2)]);
        trigger_of.insert(9, vec![prov(1, 3)]);
        TrainingSample {
            user: 1,
            history: vec![1, 2, 3],
            positive: 7,
            positive_triggers: vec![2, 3],
            hard_negatives: vec![8],
            easy_negatives: vec![9],
            trigger_of,
        }
    }

    #[test]
    fn zero_network_scores_zero() {
        let params = ModelParams::zeros(vocab(), &cfg());
        let s = sample();
        for c in [7, 8, 9] {
            assert_eq!(forward(&params, &FeatureStore::new(), &s, c, &cfg()), 0.0);
        }
        assert!((loss(&params, &FeatureStore::new(), &s, &cfg()) - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn single_event_attention_is_the_value() {
        let c = cfg();
        let params = ModelParams::init(vocab(), &c, 5);
        let store = FeatureStore::new();
        let mut s = sample();
        s.history = vec![4];
        let trace = trace_query(&params, &store, &s.to_query(), &c);
        for a in &trace.attention {
            assert_eq!(a, &vec![1.0; c.heads]);
        }
    }

    #[test]
    fn forward_is_deterministic_and_candidate_local() {
        let c = cfg();
        let params = ModelParams::init(vocab(), &c, 1);
        let store = FeatureStore::new();
        let s = sample();
        let all = score_query(&params, &store, &s.to_query(), &c);
        for (i, item) in [7, 8, 9].into_iter().enumerate() {
            assert_eq!(forward(&params, &store, &s, item, &c), all[i]);
        }
    }

    #[test]
    fn unknown_ids_use_the_oov_row() {
        let c = cfg();
        let params = ModelParams::init(vocab(), &c, 2);
        let store = FeatureStore::new();
        let mut s = sample();
        s.history = vec![1000, 2];
        s.user = 99;
        let l = loss(&params, &store, &s, &c);
        assert!(l.is_finite());
    }

    #[test]
    fn duplicated_batch_has_single_sample_gradient() {
        let c = cfg();
        let params = ModelParams::init(vocab(), &c, 3);
        let store = FeatureStore::new();
        let s = sample();
        let (l1, g1) = grad(&params, &store, std::slice::from_ref(&s), &c);
        let (l2, g2) = grad(&params, &store, &[s.clone(), s], &c);
        assert!((l1 - l2).abs() < 1e-15);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }

    #[test]
    fn untouched_rows_have_zero_gradient() {
        let c = cfg();
        let params = ModelParams::init(vocab(), &c, 4);
        let (_, g) = grad(&params, &FeatureStore::new(), &[sample()], &c);
        let item = params.layout.item;
        for row in [5, 6, 10, 11, 12] {
            assert!(g[item.row(row)].iter().all(|&v| v == 0.0), "row {row}");
        }
        assert!(g[item.row(7)].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn softmax_loss_values() {
        assert!((softmax_loss(&[0.3, 0.3]).0 - 2f64.ln()).abs() < 1e-12);
        assert!((softmax_loss(&[1.0, 0.0]).0 - 0.313_261_687_518_222_8).abs() < 1e-12);
        let a = softmax_loss(&[2.0, -1.0, 0.5]).0;
        let b = softmax_loss(&[1002.0, 999.0, 1000.5]).0;
        assert!((a - b).abs() < 1e-9);
        let mut last = f64::INFINITY;
        for lp in [-5.0, 0.0, 5.0, 50.0, 500.0] {
            let l = softmax_loss(&[lp, 0.0, 0.0]).0;
            assert!(l < last && l >= 0.0);
            last = l;
        }
        assert!(softmax_loss(&[800.0, 0.0]).0 < 1e-300);
    }

    #[test]
    fn positive_path_gradient_on_tied_toy() {
        // Tied zero network; only the final bias moves. Its gradient is zero
        // overall, but the positive term alone contributes -(1 - 1/(1+|V|)).
        let c = cfg();
        let params = ModelParams::zeros(vocab(), &c);
        let s = sample();
        let fwd = run_forward(&params, &FeatureStore::new(), &s.to_query(), &c);
        let logits: Vec<f64> = fwd.cands.iter().map(|x| x.logit).collect();
        let (_, mut probs) = softmax_loss(&logits);
        probs[0] -= 1.0;
        let bias = params.layout.out.last().unwrap().1;
        let mut g = vec![0.0; params.len()];
        run_backward(&params, &s.to_query(), &c, &fwd, &[probs[0], 0.0, 0.0], &mut g);
        let v = s.negative_count() as f64;
        assert!((g[bias.offset] + (1.0 - 1.0 / (1.0 + v))).abs() < 1e-15);
    }
}
