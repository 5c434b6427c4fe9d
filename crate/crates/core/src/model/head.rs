//! The relation head: key/value projection, bi-affine pair logits, relation
//! feature map, spatial-prefix windowed attention, global token
//! interaction, pooling and gated refinement.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{encode_entities, DocInputs, GoseParams, ModelConfig, ParamVars, WindowLayout};
use crate::docmodel::Document;
use crate::error::Result;
use crate::tensor::{gradcheck, GradcheckReport, Graph, Tensor, Var};

/// Key and value entity features at refinement round `round`.
#[derive(Debug, Clone, Copy)]
pub struct IterationState {
    pub h_k: Var,
    pub h_v: Var,
    pub round: usize,
}

/// `[N^2, d_h]` pair features in dense pair order, with the window layout
/// that partitions them.
#[derive(Debug, Clone)]
pub struct RelationFeatureMap {
    pub values: Var,
    pub layout: WindowLayout,
}

/// Query/key/value projections of a relation feature map, shared by the
/// local and global attention layers.
#[derive(Debug, Clone, Copy)]
pub struct RelationProjections {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

/// Projected spatial prefix keys and values, `[N^2, d_h]` each.
#[derive(Debug, Clone, Copy)]
pub struct PrefixKv {
    pub keys: Var,
    pub values: Var,
}

#[derive(Debug, Clone)]
pub struct SplsOutput {
    /// `[N^2, d_h]` local attention output in dense pair order.
    pub local: Var,
    /// `[windows, S^2]` softmax mass on prefix columns per query; zero for
    /// fully padded windows and when the prefix is disabled.
    pub lambda: Tensor,
    pub score_evals: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub lambda_mean: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub score_evals: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub rounds: Vec<RoundStats>,
}

fn dims2(g: &Graph, v: Var) -> (usize, usize) {
    let s = g.shape(v);
    (s[0], s[1])
}

/// `x [rows, d] + b [d]` with the bias tiled over rows.
pub fn add_bias(g: &mut Graph, x: Var, b: Var) -> Result<Var> {
    let rows = g.shape(x)[0];
    let d = g.value(b).numel();
    let b2 = g.reshape(b, &[1, d])?;
    let tiled = g.gather_rows(b2, vec![Some(0); rows].into())?;
    g.add(x, tiled)
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    add_bias(g, xw, b)
}

/// Round-0 key and value features from entity embeddings.
pub fn base_project(g: &mut Graph, p: &ParamVars, e: Var) -> Result<IterationState> {
    Ok(IterationState {
        h_k: linear(g, e, p.w_key, p.b_key)?,
        h_v: linear(g, e, p.w_value, p.b_value)?,
        round: 0,
    })
}

/// `[N, N, 2]` logits `l[i, j, c] = h_k[i] W1[:, c, :] h_v[j] + h_k[i] W2[:, c]`.
pub fn biaffine_logits(g: &mut Graph, p: &ParamVars, h_k: Var, h_v: Var) -> Result<Var> {
    let (n, d) = dims2(g, h_k);
    let w1 = g.reshape(p.w1, &[d, 2 * d])?;
    let u = g.matmul(h_k, w1)?;
    // row i * 2 + c holds h_k[i] W1[:, c, :]
    let u = g.reshape(u, &[2 * n, d])?;
    let bilinear = g.matmul_nt(u, h_v)?;
    let bilinear = g.reshape(bilinear, &[2 * n * n, 1])?;
    let affine = g.matmul(h_k, p.w2)?;
    let affine = g.reshape(affine, &[2 * n, 1])?;

    let mut bil_rows = Vec::with_capacity(2 * n * n);
    let mut aff_rows = Vec::with_capacity(2 * n * n);
    for i in 0..n {
        for j in 0..n {
            for c in 0..2 {
                bil_rows.push(Some((i * 2 + c) * n + j));
                aff_rows.push(Some(i * 2 + c));
            }
        }
    }
    let bilinear = g.gather_rows(bilinear, bil_rows.into())?;
    let affine = g.gather_rows(affine, aff_rows.into())?;
    let logits = g.add(bilinear, affine)?;
    g.reshape(logits, &[n, n, 2])
}

/// Per-pair projection of the logits into the `d_h`-wide relation features.
pub fn relation_features(
    g: &mut Graph,
    p: &ParamVars,
    logits: Var,
    layout: &WindowLayout,
) -> Result<RelationFeatureMap> {
    let n = g.shape(logits)[0];
    let flat = g.reshape(logits, &[n * n, 2])?;
    let values = linear(g, flat, p.w_r, p.b_r)?;
    Ok(RelationFeatureMap {
        values,
        layout: layout.clone(),
    })
}

/// `[N^2, d_h]` spatial prefix: per anchor (tl, ct, br) the direction
/// projected by `W_dir` followed by the distance projected by `W_dis`.
pub fn spatial_prefix(g: &mut Graph, p: &ParamVars, inputs: &DocInputs) -> Result<Var> {
    let pairs = inputs.n * inputs.n;
    let feats = inputs.pair_features.data();
    let mut parts = Vec::with_capacity(6);
    for col in 0..6 {
        let column: Vec<f64> = (0..pairs).map(|r| feats[r * 6 + col]).collect();
        let column = g.constant(Tensor::new(vec![pairs, 1], column)?);
        let w = if col % 2 == 0 { p.w_dir } else { p.w_dis };
        parts.push(g.matmul(column, w)?);
    }
    g.concat_lastdim(&parts)
}

pub fn prefix_kv(g: &mut Graph, p: &ParamVars, prefix: Var) -> Result<PrefixKv> {
    Ok(PrefixKv {
        keys: g.matmul(prefix, p.w_ks)?,
        values: g.matmul(prefix, p.w_vs)?,
    })
}

pub fn project_relations(
    g: &mut Graph,
    p: &ParamVars,
    rel: &RelationFeatureMap,
) -> Result<RelationProjections> {
    Ok(RelationProjections {
        q: g.matmul(rel.values, p.w_q)?,
        k: g.matmul(rel.values, p.w_k)?,
        v: g.matmul(rel.values, p.w_v)?,
    })
}

/// Spatial-prefix-guided local self-attention inside every window of the
/// padded pair grid. Each query attends over the window's prefix keys
/// followed by its content keys; padded cells are masked in both sets.
pub fn spls_layer(
    g: &mut Graph,
    rel: &RelationFeatureMap,
    proj: &RelationProjections,
    prefix: Option<&PrefixKv>,
) -> Result<SplsOutput> {
    let layout = &rel.layout;
    let d = g.shape(proj.q)[1];
    let s2 = layout.cells_per_window();
    let windows = layout.active_windows();
    let a = windows.len();
    let mut lambda = Tensor::zeros(&[layout.n_windows(), s2]);
    let pairs = layout.n_valid();
    if a == 0 {
        let zeros = g.constant(Tensor::zeros(&[pairs, d]));
        return Ok(SplsOutput {
            local: zeros,
            lambda,
            score_evals: 0,
        });
    }

    let rows = layout.gather_rows(&windows);
    let q = g.gather_rows(proj.q, rows.clone())?;
    let q = g.reshape(q, &[a, s2, d])?;
    let k = g.gather_rows(proj.k, rows.clone())?;
    let v = g.gather_rows(proj.v, rows.clone())?;

    let (keys, vals, n_keys) = match prefix {
        Some(pf) => {
            let pk = g.gather_rows(pf.keys, rows.clone())?;
            let pv = g.gather_rows(pf.values, rows.clone())?;
            let kcat = g.concat_rows(&[pk, k])?;
            let vcat = g.concat_rows(&[pv, v])?;
            let hybrid: Arc<[Option<usize>]> = (0..a)
                .flat_map(|w| {
                    (0..2 * s2).map(move |p| {
                        Some(if p < s2 {
                            w * s2 + p
                        } else {
                            a * s2 + w * s2 + (p - s2)
                        })
                    })
                })
                .collect();
            let keys = g.gather_rows(kcat, hybrid.clone())?;
            let vals = g.gather_rows(vcat, hybrid)?;
            (
                g.reshape(keys, &[a, 2 * s2, d])?,
                g.reshape(vals, &[a, 2 * s2, d])?,
                2 * s2,
            )
        }
        None => (g.reshape(k, &[a, s2, d])?, g.reshape(v, &[a, s2, d])?, s2),
    };

    let mut mask = Vec::with_capacity(a * s2 * n_keys);
    for &w in &windows {
        let valid: Vec<bool> = (0..s2).map(|p| layout.pair_index(w, p).is_some()).collect();
        for _ in 0..s2 {
            mask.extend((0..n_keys).map(|j| valid[j % s2]));
        }
    }

    let before = g.score_evals();
    let scores = g.attention_scores(q, keys, 1.0 / (d as f64).sqrt())?;
    let score_evals = g.score_evals() - before;
    let attn = g.softmax_lastdim(scores, Some(mask.into()))?;
    if prefix.is_some() {
        let probs = g.value(attn).data();
        for (slot, &w) in windows.iter().enumerate() {
            for qi in 0..s2 {
                let row = &probs[(slot * s2 + qi) * n_keys..(slot * s2 + qi + 1) * n_keys];
                lambda.data_mut()[w * s2 + qi] = row[..s2].iter().sum();
            }
        }
    }
    let out = g.bmm(attn, vals)?;
    let out = g.reshape(out, &[a * s2, d])?;
    let local = g.gather_rows(out, layout.scatter_rows(&windows))?;
    Ok(SplsOutput {
        local,
        lambda,
        score_evals,
    })
}

/// Global tokens attend over every valid cell, then every cell attends over
/// the updated tokens. Returns `[N^2, d_h]`.
pub fn global_interaction(g: &mut Graph, p: &ParamVars, proj: &RelationProjections) -> Result<Var> {
    let d = g.shape(proj.q)[1];
    let scale = 1.0 / (d as f64).sqrt();
    let qt = g.matmul(p.tokens, p.w_qt)?;
    let s1 = g.attention_scores(qt, proj.k, scale)?;
    let a1 = g.softmax_lastdim(s1, None)?;
    let pooled = g.matmul(a1, proj.v)?;
    let kt = g.matmul(pooled, p.w_kt)?;
    let vt = g.matmul(pooled, p.w_vt)?;
    let s2 = g.attention_scores(proj.q, kt, scale)?;
    let a2 = g.softmax_lastdim(s2, None)?;
    g.matmul(a2, vt)
}

/// Mean-pool `[N^2, d_h]` features into key features (over the value axis)
/// and value features (over the key axis).
pub fn pool(g: &mut Graph, r_next: Var, n: usize) -> Result<(Var, Var)> {
    let d = g.shape(r_next)[1];
    let grid = g.reshape(r_next, &[n, n, d])?;
    Ok((g.mean_axis(grid, 1)?, g.mean_axis(grid, 0)?))
}

/// `h + sigmoid([h; h_hat] W_g + b_g) * h_hat`
pub fn gate(g: &mut Graph, p: &ParamVars, h: Var, h_hat: Var) -> Result<Var> {
    let cat = g.concat_lastdim(&[h, h_hat])?;
    let pre = linear(g, cat, p.w_g, p.b_g)?;
    let gate = g.sigmoid(pre);
    let update = g.mul(gate, h_hat)?;
    g.add(h, update)
}

pub fn pool_and_gate(
    g: &mut Graph,
    p: &ParamVars,
    r_next: Var,
    state: &IterationState,
) -> Result<IterationState> {
    let n = g.shape(state.h_k)[0];
    let (hk_hat, hv_hat) = pool(g, r_next, n)?;
    Ok(IterationState {
        h_k: gate(g, p, state.h_k, hk_hat)?,
        h_v: gate(g, p, state.h_v, hv_hat)?,
        round: state.round + 1,
    })
}

/// One mining step on the relation map: local plus global attention, or the
/// map itself when the module is ablated.
fn mine_structure(
    g: &mut Graph,
    p: &ParamVars,
    rel: &RelationFeatureMap,
    prefix: Option<&PrefixKv>,
    cfg: &ModelConfig,
) -> Result<(Var, RoundStats)> {
    if !cfg.use_gskm {
        return Ok((rel.values, RoundStats::default()));
    }
    let before = g.score_evals();
    let proj = project_relations(g, p, rel)?;
    let spls = spls_layer(g, rel, &proj, prefix)?;
    let global = global_interaction(g, p, &proj)?;
    let r_next = g.add(spls.local, global)?;

    let layout = &rel.layout;
    let mut lambdas = Vec::with_capacity(layout.n_valid());
    for w in 0..layout.n_windows() {
        for pos in 0..layout.cells_per_window() {
            if layout.pair_index(w, pos).is_some() {
                lambdas.push(spls.lambda.data()[w * layout.cells_per_window() + pos]);
            }
        }
    }
    let stats = RoundStats {
        lambda_mean: lambdas.iter().sum::<f64>() / lambdas.len().max(1) as f64,
        lambda_min: lambdas.iter().copied().fold(f64::INFINITY, f64::min).min(1.0),
        lambda_max: lambdas.iter().copied().fold(0.0, f64::max),
        score_evals: g.score_evals() - before,
    };
    Ok((r_next, stats))
}

/// Build the full forward pass on `g`; returns the `[N, N, 2]` final logits.
pub fn forward_graph(
    g: &mut Graph,
    p: &ParamVars,
    inputs: &DocInputs,
    cfg: &ModelConfig,
) -> Result<(Var, Diagnostics)> {
    let e = encode_entities(g, p, inputs)?;
    let mut state = base_project(g, p, e)?;
    let prefix = if cfg.use_gskm && cfg.use_spatial_prefix {
        let s = spatial_prefix(g, p, inputs)?;
        Some(prefix_kv(g, p, s)?)
    } else {
        None
    };
    let mut diagnostics = Diagnostics::default();
    for _ in 0..cfg.rounds {
        let logits = biaffine_logits(g, p, state.h_k, state.h_v)?;
        let rel = relation_features(g, p, logits, &inputs.layout)?;
        let (r_next, stats) = mine_structure(g, p, &rel, prefix.as_ref(), cfg)?;
        diagnostics.rounds.push(stats);
        if !cfg.use_iteration {
            // single pass scored directly from the pooled features
            let (hk_hat, hv_hat) = pool(g, r_next, inputs.n)?;
            let logits = biaffine_logits(g, p, hk_hat, hv_hat)?;
            return Ok((logits, diagnostics));
        }
        state = pool_and_gate(g, p, r_next, &state)?;
    }
    let logits = biaffine_logits(g, p, state.h_k, state.h_v)?;
    Ok((logits, diagnostics))
}

pub fn forward(doc: &Document, params: &GoseParams, cfg: &ModelConfig) -> Result<(Tensor, Diagnostics)> {
    let inputs = DocInputs::new(doc, cfg)?;
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let (logits, diag) = forward_graph(&mut g, &vars, &inputs, cfg)?;
    Ok((g.value(logits).clone(), diag))
}

/// Summed two-class cross-entropy over all ordered pairs `i != j`.
pub fn loss(g: &mut Graph, logits: Var, links: &BTreeSet<(usize, usize)>) -> Result<Var> {
    let n = g.shape(logits)[0];
    let flat = g.reshape(logits, &[n * n, 2])?;
    let logp = g.log_softmax_lastdim(flat)?;
    let logp = g.reshape(logp, &[n * n * 2, 1])?;
    let mut picks = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let y = usize::from(links.contains(&(i, j)));
                picks.push(Some((i * n + j) * 2 + y));
            }
        }
    }
    let picked = g.gather_rows(logp, picks.into())?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0))
}

/// Links whose link logit strictly exceeds the no-link logit, diagonal excluded.
pub fn predict(logits: &Tensor) -> BTreeSet<(usize, usize)> {
    let n = logits.shape()[0];
    let d = logits.data();
    let mut out = BTreeSet::new();
    for i in 0..n {
        for j in 0..n {
            let base = (i * n + j) * 2;
            if i != j && d[base + 1] > d[base] {
                out.insert((i, j));
            }
        }
    }
    out
}

/// Loss value, parameter gradients and final logits for one document.
pub struct StepOutput {
    pub loss: f64,
    pub grads: GoseParams,
    pub logits: Tensor,
    pub diagnostics: Diagnostics,
}

pub fn loss_and_grads(doc: &Document, params: &GoseParams, cfg: &ModelConfig) -> Result<StepOutput> {
    let inputs = DocInputs::new(doc, cfg)?;
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let (logits, diagnostics) = forward_graph(&mut g, &vars, &inputs, cfg)?;
    let l = loss(&mut g, logits, &doc.links)?;
    g.backward(l)?;
    Ok(StepOutput {
        loss: g.value(l).item()?,
        grads: params.gradients(&g, &vars),
        logits: g.value(logits).clone(),
        diagnostics,
    })
}

/// Central-difference check of the document loss against its analytic
/// gradient, over every parameter coordinate.
pub fn gradcheck_loss(doc: &Document, params: &GoseParams, cfg: &ModelConfig, h: f64) -> Result<GradcheckReport> {
    let inputs = DocInputs::new(doc, cfg)?;
    let tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    gradcheck(
        |g, vars| {
            let p = ParamVars::from_vars(vars)?;
            let (logits, _) = forward_graph(g, &p, &inputs, cfg)?;
            loss(g, logits, &doc.links)
        },
        &tensors,
        h,
    )
}
