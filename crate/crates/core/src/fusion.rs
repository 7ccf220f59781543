//! Weak and strong prompt fusion, the semantic adapter, and the full
//! forward pass that threads them through the backbone.
//!
//! All fusion attention is single-head with scores scaled by `1/√D`.
//! Weak fusion runs once on the inputs and has no residual. Strong fusion
//! runs before every block past the layer split and is residual; it mixes
//! query-key attention with a softmax over a per-key predicted bias.

use crate::autodiff::{Graph, Var};
use crate::backbone::{
    assemble_input, block_forward, patchify_embed, AttentionRecord, AttnPart, BlockSettings,
    BlockVars, PatchEmbedVars, Site, TokenSequence, FIRST_PATCH_POS,
};
use crate::config::{RunConfig, Toggles};
use crate::error::{Error, Result};
use crate::params::{ParamIds, ProjIds};

/// Query/key/value maps of one fusion site, each `D × D`.
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

impl Projection {
    pub fn from_ids(ids: &ProjIds, vars: &[Var]) -> Self {
        Projection {
            q: vars[ids.q],
            k: vars[ids.k],
            v: vars[ids.v],
        }
    }
}

/// Where to put attention matrices, and which block they precede.
pub struct Trace<'a> {
    pub records: &'a mut Vec<AttentionRecord>,
    pub layer: usize,
}

fn labels(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn record(
    g: &Graph,
    trace: &mut Option<Trace<'_>>,
    site: Site,
    part: AttnPart,
    query: Vec<String>,
    key_prefix: &str,
    weights: Var,
) {
    if let Some(t) = trace {
        let w = g.value(weights).clone();
        t.records.push(AttentionRecord {
            site,
            part,
            layer: t.layer,
            head: 0,
            query_labels: query,
            key_labels: labels(key_prefix, w.cols()),
            weights: w,
        });
    }
}

/// `softmax(q(query) k(keys)ᵀ / √D)` and `v(keys)`.
fn attend(g: &mut Graph, query: Var, keys: Var, proj: &Projection) -> Result<(Var, Var)> {
    let (_, d) = g.value(query).rank2("fusion")?;
    let (_, dk) = g.value(keys).rank2("fusion")?;
    if d != dk {
        return Err(Error::shape("fusion", g.shape(query), g.shape(keys)));
    }
    let q = g.matmul(query, proj.q)?;
    let k = g.matmul(keys, proj.k)?;
    let v = g.matmul(keys, proj.v)?;
    let s = g.matmul_nt(q, k)?;
    let s = g.scale(s, 1.0 / (d as f64).sqrt())?;
    let w = g.softmax_rows(s)?;
    Ok((w, v))
}

fn check_vector(g: &Graph, v: Var, op: &'static str) -> Result<()> {
    match g.shape(v) {
        [1, _] => Ok(()),
        other => Err(Error::shape(op, other, &[1, 0])),
    }
}

/// Visual prompt enriched from the layer-0 patch tokens (no residual).
pub fn weak_visual_fusion(
    g: &mut Graph,
    f_vp0: Var,
    patches: Var,
    proj: &Projection,
    mut trace: Option<Trace<'_>>,
) -> Result<Var> {
    check_vector(g, f_vp0, "weak_visual_fusion")?;
    let (w, v) = attend(g, f_vp0, patches, proj)?;
    record(
        g,
        &mut trace,
        Site::WeakVisual,
        AttnPart::QueryKey,
        vec!["vp".into()],
        "patch",
        w,
    );
    g.matmul(w, v)
}

/// Semantic prompt enriched from the attribute matrix (no residual).
pub fn weak_semantic_fusion(
    g: &mut Graph,
    f_sp0: Var,
    attrs: Var,
    proj: &Projection,
    mut trace: Option<Trace<'_>>,
) -> Result<Var> {
    check_vector(g, f_sp0, "weak_semantic_fusion")?;
    let (w, v) = attend(g, f_sp0, attrs, proj)?;
    record(
        g,
        &mut trace,
        Site::WeakSemantic,
        AttnPart::QueryKey,
        vec!["sp".into()],
        "attr",
        w,
    );
    g.matmul(w, v)
}

#[allow(clippy::too_many_arguments)]
fn strong_fusion(
    g: &mut Graph,
    prompt: Var,
    keys: Var,
    proj: &Projection,
    beta: Var,
    alpha: f64,
    site: Site,
    mut trace: Option<Trace<'_>>,
) -> Result<Var> {
    let op = site.name();
    check_vector(g, prompt, op)?;
    let d = g.value(prompt).cols();
    if g.shape(beta) != [d, 1] {
        return Err(Error::shape(op, g.shape(beta), &[d, 1]));
    }
    let alpha = alpha.clamp(0.0, 1.0);
    let (w, v) = attend(g, prompt, keys, proj)?;
    let bias = g.matmul(keys, beta)?;
    let bias = g.transpose(bias)?;
    let wb = g.softmax_rows(bias)?;
    let a = g.scale(w, alpha)?;
    let b = g.scale(wb, 1.0 - alpha)?;
    let mix = g.add(a, b)?;
    let (query, key_prefix) = match site {
        Site::StrongVisual => ("vp", "patch"),
        _ => ("sp", "attr"),
    };
    for (part, m) in [
        (AttnPart::QueryKey, w),
        (AttnPart::Bias, wb),
        (AttnPart::Mixed, mix),
    ] {
        record(g, &mut trace, site, part, vec![query.into()], key_prefix, m);
    }
    let out = g.matmul(mix, v)?;
    g.add(out, prompt)
}

/// `[α softmax(q kᵀ/√D) + (1−α) softmax(B)] v(F) + f_vp`, where `B` is the
/// bias head applied to each patch token. Only patch tokens are keys.
pub fn strong_visual_fusion(
    g: &mut Graph,
    f_vp: Var,
    patches: Var,
    proj: &Projection,
    beta_v: Var,
    alpha_v: f64,
    trace: Option<Trace<'_>>,
) -> Result<Var> {
    strong_fusion(
        g,
        f_vp,
        patches,
        proj,
        beta_v,
        alpha_v,
        Site::StrongVisual,
        trace,
    )
}

/// Mirror of [`strong_visual_fusion`] over the adapted attribute rows.
pub fn strong_semantic_fusion(
    g: &mut Graph,
    f_sp: Var,
    attrs: Var,
    proj: &Projection,
    beta_s: Var,
    alpha_s: f64,
    trace: Option<Trace<'_>>,
) -> Result<Var> {
    strong_fusion(
        g,
        f_sp,
        attrs,
        proj,
        beta_s,
        alpha_s,
        Site::StrongSemantic,
        trace,
    )
}

/// `S_l = α softmax(q(S_{l−1}) k(F)ᵀ/√D) v(F) + (1−α) S_{l−1}`.
pub fn adapter_update(
    g: &mut Graph,
    s_prev: Var,
    patches: Var,
    proj: &Projection,
    alpha_a: f64,
    mut trace: Option<Trace<'_>>,
) -> Result<Var> {
    let alpha = alpha_a.clamp(0.0, 1.0);
    let (w, v) = attend(g, s_prev, patches, proj)?;
    let n_a = g.value(s_prev).rows();
    record(
        g,
        &mut trace,
        Site::Adapter,
        AttnPart::QueryKey,
        labels("attr", n_a),
        "patch",
        w,
    );
    let upd = g.matmul(w, v)?;
    let upd = g.scale(upd, alpha)?;
    let keep = g.scale(s_prev, 1.0 - alpha)?;
    g.add(upd, keep)
}

fn trace_at<'a>(
    records: &'a mut Option<&mut Vec<AttentionRecord>>,
    layer: usize,
) -> Option<Trace<'a>> {
    records
        .as_deref_mut()
        .map(|records| Trace { records, layer })
}

/// Everything the forward pass needs besides parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardSettings {
    pub heads: usize,
    pub depth: usize,
    pub layer_split: usize,
    pub toggles: Toggles,
    pub alpha_v: f64,
    pub alpha_s: f64,
    pub alpha_a: f64,
}

impl ForwardSettings {
    pub fn from_config(cfg: &RunConfig) -> Self {
        ForwardSettings {
            heads: cfg.model.heads,
            depth: cfg.model.depth,
            layer_split: cfg.model.layer_split,
            toggles: cfg.toggles,
            alpha_v: cfg.alpha_v,
            alpha_s: cfg.alpha_s,
            alpha_a: cfg.alpha_a,
        }
    }
}

pub struct ForwardOutput {
    /// `F^M`.
    pub tokens: TokenSequence,
    /// Attribute state after the last adapter update (`S⁰` if none ran).
    pub attrs: Var,
}

/// Full pass: embed patches, weak-fuse the prompts, run the blocks with
/// adapter + strong fusion before every block past the layer split.
///
/// With `pv`/`ps` off the corresponding token stays in the sequence but is
/// removed from every attention's keys, so it cannot influence anything.
pub fn forward_vspcn(
    g: &mut Graph,
    image: Var,
    attrs0: Var,
    ids: &ParamIds,
    vars: &[Var],
    settings: &ForwardSettings,
    mut records: Option<&mut Vec<AttentionRecord>>,
) -> Result<ForwardOutput> {
    let t = &settings.toggles;
    t.validate()?;
    if settings.layer_split > settings.depth || ids.blocks.len() != settings.depth {
        return Err(Error::Config(format!(
            "layer split {} / depth {} / {} blocks are inconsistent",
            settings.layer_split,
            settings.depth,
            ids.blocks.len()
        )));
    }
    let fp = &ids.fusion;

    let patches0 = patchify_embed(g, image, &PatchEmbedVars::from_ids(ids, vars))?;
    let vp0 = vars[ids.vp];
    let sp0 = vars[ids.sp];
    let vp = if t.wvpf {
        let proj = Projection::from_ids(&fp.wvpf, vars);
        weak_visual_fusion(g, vp0, patches0, &proj, trace_at(&mut records, 0))?
    } else {
        vp0
    };
    let sp = if t.wspf {
        let proj = Projection::from_ids(&fp.wspf, vars);
        weak_semantic_fusion(g, sp0, attrs0, &proj, trace_at(&mut records, 0))?
    } else {
        sp0
    };
    let mut seq = assemble_input(g, vars[ids.cls], vp, sp, patches0)?;

    let n_tokens = g.value(patches0).rows() + FIRST_PATCH_POS;
    let key_keep: Option<Vec<bool>> = (!t.pv || !t.ps).then(|| {
        let mut keep = vec![true; n_tokens];
        keep[1] = t.pv;
        keep[2] = t.ps;
        keep
    });
    let block_settings = BlockSettings {
        heads: settings.heads,
        depth: settings.depth,
        key_keep: key_keep.as_deref(),
    };

    let mut attrs = attrs0;
    for (layer, block_ids) in ids.blocks.iter().enumerate() {
        if layer >= settings.layer_split {
            if t.adapter {
                let proj = Projection::from_ids(&fp.adapter, vars);
                attrs = adapter_update(
                    g,
                    attrs,
                    seq.patches,
                    &proj,
                    settings.alpha_a,
                    trace_at(&mut records, layer),
                )?;
            }
            if t.svpf {
                let proj = Projection::from_ids(&fp.svpf, vars);
                seq.vp = strong_visual_fusion(
                    g,
                    seq.vp,
                    seq.patches,
                    &proj,
                    vars[fp.beta_v],
                    settings.alpha_v,
                    trace_at(&mut records, layer),
                )?;
            }
            if t.sspf {
                let proj = Projection::from_ids(&fp.sspf, vars);
                seq.sp = strong_semantic_fusion(
                    g,
                    seq.sp,
                    attrs,
                    &proj,
                    vars[fp.beta_s],
                    settings.alpha_s,
                    trace_at(&mut records, layer),
                )?;
            }
        }
        let bv = BlockVars::from_ids(block_ids, vars);
        seq = block_forward(g, &seq, &bv, &block_settings, records.as_deref_mut())?;
    }
    Ok(ForwardOutput { tokens: seq, attrs })
}
