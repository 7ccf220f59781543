//! Patch embedding and pre-norm transformer blocks over the token sequence
//! `[cls, vp, sp, patch_1 .. patch_Nv]`.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{BlockIds, ParamIds};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;

/// Sequence positions of the three special tokens.
pub const CLS_POS: usize = 0;
pub const VP_POS: usize = 1;
pub const SP_POS: usize = 2;
pub const FIRST_PATCH_POS: usize = 3;

/// Token stream between blocks.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    pub cls: Var,
    pub vp: Var,
    pub sp: Var,
    /// `N_v × D`.
    pub patches: Var,
    /// Number of blocks applied so far.
    pub layer_index: usize,
}

impl TokenSequence {
    /// `(N_v + 3) × D` stacked view in canonical order.
    pub fn stacked(&self, g: &mut Graph) -> Result<Var> {
        g.concat_rows(&[self.cls, self.vp, self.sp, self.patches])
    }

    /// Inverse of [`TokenSequence::stacked`].
    pub fn split(g: &mut Graph, x: Var, layer_index: usize) -> Result<Self> {
        let rows = g.value(x).rows();
        if rows < FIRST_PATCH_POS + 1 {
            return Err(Error::Config(format!(
                "token sequence needs at least one patch, got {rows} rows"
            )));
        }
        Ok(TokenSequence {
            cls: g.slice_rows(x, CLS_POS, 1)?,
            vp: g.slice_rows(x, VP_POS, 1)?,
            sp: g.slice_rows(x, SP_POS, 1)?,
            patches: g.slice_rows(x, FIRST_PATCH_POS, rows - FIRST_PATCH_POS)?,
            layer_index,
        })
    }

    pub fn len(&self, g: &Graph) -> usize {
        g.value(self.patches).rows() + FIRST_PATCH_POS
    }

    pub fn is_empty(&self, _g: &Graph) -> bool {
        false
    }
}

/// Concatenates the input pieces into the layer-0 sequence.
pub fn assemble_input(
    g: &Graph,
    cls: Var,
    vp: Var,
    sp: Var,
    patches: Var,
) -> Result<TokenSequence> {
    let (n_v, d) = g.value(patches).rank2("assemble_input")?;
    if n_v == 0 {
        return Err(Error::Config("no patch tokens".into()));
    }
    for piece in [cls, vp, sp] {
        if g.shape(piece) != [1, d] {
            return Err(Error::shape("assemble_input", g.shape(piece), &[1, d]));
        }
    }
    Ok(TokenSequence {
        cls,
        vp,
        sp,
        patches,
        layer_index: 0,
    })
}

pub struct PatchEmbedVars {
    pub w: Var,
    pub b: Var,
    pub pos: Var,
}

impl PatchEmbedVars {
    pub fn from_ids(ids: &ParamIds, vars: &[Var]) -> Self {
        PatchEmbedVars {
            w: vars[ids.patch_w],
            b: vars[ids.patch_b],
            pos: vars[ids.pos],
        }
    }
}

/// `image · W + b + pos`, one D-dim token per patch.
pub fn patchify_embed(g: &mut Graph, image: Var, p: &PatchEmbedVars) -> Result<Var> {
    let (n_v, pd) = g.value(image).rank2("patchify_embed")?;
    let (wr, _) = g.value(p.w).rank2("patchify_embed")?;
    if wr != pd || g.value(p.pos).rows() != n_v {
        return Err(Error::shape(
            "patchify_embed",
            g.shape(image),
            g.shape(p.pos),
        ));
    }
    let x = g.matmul(image, p.w)?;
    let x = g.add_row(x, p.b)?;
    g.add(x, p.pos)
}

pub struct BlockVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub w_qkv: Var,
    pub b_q: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w_1: Var,
    pub b_1: Var,
    pub w_2: Var,
    pub b_2: Var,
}

impl BlockVars {
    pub fn from_ids(ids: &BlockIds, vars: &[Var]) -> Self {
        BlockVars {
            ln1_g: vars[ids.ln1_g],
            ln1_b: vars[ids.ln1_b],
            w_qkv: vars[ids.w_qkv],
            b_q: vars[ids.b_q],
            b_v: vars[ids.b_v],
            w_o: vars[ids.w_o],
            b_o: vars[ids.b_o],
            ln2_g: vars[ids.ln2_g],
            ln2_b: vars[ids.ln2_b],
            w_1: vars[ids.w_1],
            b_1: vars[ids.b_1],
            w_2: vars[ids.w_2],
            b_2: vars[ids.b_2],
        }
    }
}

/// Where an attention matrix came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Site {
    Backbone,
    WeakVisual,
    WeakSemantic,
    StrongVisual,
    StrongSemantic,
    Adapter,
}

impl Site {
    pub fn name(self) -> &'static str {
        match self {
            Site::Backbone => "backbone",
            Site::WeakVisual => "wvpf",
            Site::WeakSemantic => "wspf",
            Site::StrongVisual => "svpf",
            Site::StrongSemantic => "sspf",
            Site::Adapter => "adapter",
        }
    }
}

/// Which attention distribution of a site a record holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnPart {
    /// `softmax(q kᵀ / √d)`.
    QueryKey,
    /// `softmax(B)` from the bias head.
    Bias,
    /// The α-weighted mixture actually applied to the values.
    Mixed,
}

impl AttnPart {
    pub fn name(self) -> &'static str {
        match self {
            AttnPart::QueryKey => "qk",
            AttnPart::Bias => "bias",
            AttnPart::Mixed => "mixed",
        }
    }
}

/// Rows are queries, columns keys.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub site: Site,
    pub part: AttnPart,
    /// Block index the attention feeds into (0-based).
    pub layer: usize,
    pub head: usize,
    pub query_labels: Vec<String>,
    pub key_labels: Vec<String>,
    pub weights: Tensor,
}

pub const ATTENTION_CSV_HEADER: &str = "site,part,layer,head,query,key,weight";

/// One CSV line per attention weight.
pub fn attention_csv(records: &[AttentionRecord]) -> String {
    use std::fmt::Write as _;
    let mut out = format!("{ATTENTION_CSV_HEADER}\n");
    for r in records {
        for (i, q) in r.query_labels.iter().enumerate() {
            for (j, k) in r.key_labels.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{q},{k},{}",
                    r.site.name(),
                    r.part.name(),
                    r.layer,
                    r.head,
                    r.weights.get(i, j)
                );
            }
        }
    }
    out
}

/// Labels for the tokens of a sequence with `n_v` patches.
pub fn token_labels(n_v: usize) -> Vec<String> {
    let mut out = vec!["cls".to_string(), "vp".to_string(), "sp".to_string()];
    out.extend((0..n_v).map(|i| format!("patch{i}")));
    out
}

pub struct BlockSettings<'a> {
    pub heads: usize,
    pub depth: usize,
    /// Per-key flags; `false` removes that token from every query's attention.
    pub key_keep: Option<&'a [bool]>,
}

/// `x + MHA(LN(x))` followed by `x + MLP(LN(x))`.
pub fn block_forward(
    g: &mut Graph,
    seq: &TokenSequence,
    p: &BlockVars,
    settings: &BlockSettings<'_>,
    mut trace: Option<&mut Vec<AttentionRecord>>,
) -> Result<TokenSequence> {
    if seq.layer_index >= settings.depth {
        return Err(Error::Contract(format!(
            "block at layer {} but depth is {}",
            seq.layer_index, settings.depth
        )));
    }
    let x = seq.stacked(g)?;
    let (t, d) = g.value(x).rank2("block_forward")?;
    let heads = settings.heads;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide {d}")));
    }
    let dh = d / heads;

    let h = g.layer_norm_rows(x, LN_EPS)?;
    let h = g.mul_row(h, p.ln1_g)?;
    let h = g.add_row(h, p.ln1_b)?;
    let qkv = g.matmul(h, p.w_qkv)?;
    let q_all = g.slice_cols(qkv, 0, d)?;
    let q_all = g.add_row(q_all, p.b_q)?;
    let k_all = g.slice_cols(qkv, d, d)?;
    let v_all = g.slice_cols(qkv, 2 * d, d)?;
    let v_all = g.add_row(v_all, p.b_v)?;

    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let q = g.slice_cols(q_all, head * dh, dh)?;
        let k = g.slice_cols(k_all, head * dh, dh)?;
        let v = g.slice_cols(v_all, head * dh, dh)?;
        let s = g.matmul_nt(q, k)?;
        let s = g.scale(s, scale)?;
        let a = g.softmax_rows_masked(s, settings.key_keep)?;
        if let Some(tr) = trace.as_deref_mut() {
            let labels = token_labels(t - FIRST_PATCH_POS);
            tr.push(AttentionRecord {
                site: Site::Backbone,
                part: AttnPart::QueryKey,
                layer: seq.layer_index,
                head,
                query_labels: labels.clone(),
                key_labels: labels,
                weights: g.value(a).clone(),
            });
        }
        outs.push(g.matmul(a, v)?);
    }
    let o = if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    let o = g.matmul(o, p.w_o)?;
    let o = g.add_row(o, p.b_o)?;
    let x = g.add(x, o)?;

    let h = g.layer_norm_rows(x, LN_EPS)?;
    let h = g.mul_row(h, p.ln2_g)?;
    let h = g.add_row(h, p.ln2_b)?;
    let m = g.matmul(h, p.w_1)?;
    let m = g.add_row(m, p.b_1)?;
    let m = g.gelu(m)?;
    let m = g.matmul(m, p.w_2)?;
    let m = g.add_row(m, p.b_2)?;
    let x = g.add(x, m)?;

    TokenSequence::split(g, x, seq.layer_index + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gelu, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct RawBlock {
        t: Vec<Tensor>,
    }

    fn random_block(d: usize, hidden: usize, seed: u64) -> RawBlock {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes: [&[usize]; 13] = [
            &[1, d],
            &[1, d],
            &[d, 3 * d],
            &[1, d],
            &[d, d],
            &[1, d],
            &[1, d],
            &[1, d],
            &[d, hidden],
            &[1, hidden],
            &[hidden, d],
            &[1, d],
            &[1, d],
        ];
        RawBlock {
            t: shapes
                .iter()
                .map(|s| Tensor::randn(s, 0.5, &mut rng))
                .collect(),
        }
    }

    fn bind_block(g: &mut Graph, raw: &RawBlock) -> BlockVars {
        let v: Vec<Var> = raw
            .t
            .iter()
            .map(|t| g.constant(t.clone()).unwrap())
            .collect();
        BlockVars {
            ln1_g: v[0],
            ln1_b: v[1],
            w_qkv: v[2],
            b_q: v[3],
            b_v: v[12],
            w_o: v[4],
            b_o: v[5],
            ln2_g: v[6],
            ln2_b: v[7],
            w_1: v[8],
            b_1: v[9],
            w_2: v[10],
            b_2: v[11],
        }
    }

    fn seq_from(g: &mut Graph, x: &Tensor) -> TokenSequence {
        let v = g.constant(x.clone()).unwrap();
        TokenSequence::split(g, v, 0).unwrap()
    }

    /// Straight-line block with nested loops, no tape.
    fn oracle_block(x: &[Vec<f64>], raw: &RawBlock, heads: usize) -> Vec<Vec<f64>> {
        let t = x.len();
        let d = x[0].len();
        let dh = d / heads;
        let p = |i: usize| raw.t[i].data();
        let ln = |row: &[f64], gamma: &[f64], beta: &[f64]| -> Vec<f64> {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            (0..d)
                .map(|j| (row[j] - mean) / (var + LN_EPS).sqrt() * gamma[j] + beta[j])
                .collect()
        };
        let lin = |row: &[f64], w: &[f64], b: &[f64], out: usize| -> Vec<f64> {
            (0..out)
                .map(|j| b[j] + (0..row.len()).map(|i| row[i] * w[i * out + j]).sum::<f64>())
                .collect()
        };
        let qkv_bias = [p(3), &vec![0.0; d][..], p(12)].concat();
        let qkv: Vec<Vec<f64>> = x
            .iter()
            .map(|r| lin(&ln(r, p(0), p(1)), p(2), &qkv_bias, 3 * d))
            .collect();
        let mut att = vec![vec![0.0; d]; t];
        for h in 0..heads {
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| {
                        (0..dh)
                            .map(|c| qkv[i][h * dh + c] * qkv[j][d + h * dh + c])
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    att[i][h * dh + c] =
                        (0..t).map(|j| e[j] / z * qkv[j][2 * d + h * dh + c]).sum();
                }
            }
        }
        let hidden = raw.t[8].cols();
        x.iter()
            .zip(&att)
            .map(|(r, a)| {
                let o = lin(a, p(4), p(5), d);
                let x1: Vec<f64> = r.iter().zip(&o).map(|(u, v)| u + v).collect();
                let m: Vec<f64> = lin(&ln(&x1, p(6), p(7)), p(8), p(9), hidden)
                    .into_iter()
                    .map(gelu)
                    .collect();
                let m = lin(&m, p(10), p(11), d);
                x1.iter().zip(&m).map(|(u, v)| u + v).collect()
            })
            .collect()
    }

    #[test]
    fn block_matches_straight_line_oracle() {
        let (d, heads, n_v) = (8, 2, 4);
        let raw = random_block(d, 16, 1);
        let x = Tensor::randn(&[n_v + 3, d], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let mut g = Graph::new();
        let bv = bind_block(&mut g, &raw);
        let seq = seq_from(&mut g, &x);
        let settings = BlockSettings {
            heads,
            depth: 1,
            key_keep: None,
        };
        let out = block_forward(&mut g, &seq, &bv, &settings, None).unwrap();
        assert_eq!(out.layer_index, 1);
        let stacked = out.stacked(&mut g).unwrap();
        let rows: Vec<Vec<f64>> = (0..x.rows()).map(|i| x.row(i).to_vec()).collect();
        let expected = oracle_block(&rows, &raw, heads);
        for (i, row) in expected.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((g.value(stacked).get(i, j) - v).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn zero_weights_give_residual_identity() {
        let d = 4;
        let mut raw = random_block(d, 8, 3);
        for i in [2, 3, 4, 5, 8, 9, 10, 11] {
            raw.t[i] = Tensor::zeros(raw.t[i].shape());
        }
        let x = Tensor::randn(&[5, d], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let mut g = Graph::new();
        let bv = bind_block(&mut g, &raw);
        let seq = seq_from(&mut g, &x);
        let settings = BlockSettings {
            heads: 2,
            depth: 2,
            key_keep: None,
        };
        let out = block_forward(&mut g, &seq, &bv, &settings, None).unwrap();
        let s = out.stacked(&mut g).unwrap();
        assert_eq!(g.value(s), &x);
    }

    #[test]
    fn attention_rows_normalised_and_layer_checked() {
        let d = 6;
        let raw = random_block(d, 12, 5);
        let x = Tensor::randn(&[7, d], 1.0, &mut ChaCha8Rng::seed_from_u64(6));
        let mut g = Graph::new();
        let bv = bind_block(&mut g, &raw);
        let seq = seq_from(&mut g, &x);
        let settings = BlockSettings {
            heads: 3,
            depth: 1,
            key_keep: None,
        };
        let mut trace = Vec::new();
        let out = block_forward(&mut g, &seq, &bv, &settings, Some(&mut trace)).unwrap();
        assert_eq!(trace.len(), 3);
        for rec in &trace {
            for i in 0..rec.weights.rows() {
                assert!((rec.weights.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
        assert_eq!(out.len(&g), 7);
        assert!(matches!(
            block_forward(&mut g, &out, &bv, &settings, None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn masked_prompts_do_not_affect_other_tokens() {
        // With vp/sp masked as keys, cls and patches evolve exactly as in a
        // sequence that never contained them.
        let d = 4;
        let raw = random_block(d, 8, 7);
        let full = Tensor::randn(&[6, d], 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let keep = [true, false, false, true, true, true];
        let mut g = Graph::new();
        let bv = bind_block(&mut g, &raw);
        let seq = seq_from(&mut g, &full);
        let settings = BlockSettings {
            heads: 2,
            depth: 1,
            key_keep: Some(&keep),
        };
        let out = block_forward(&mut g, &seq, &bv, &settings, None).unwrap();
        let stacked = out.stacked(&mut g).unwrap();

        let rows: Vec<Vec<f64>> = [0, 3, 4, 5].iter().map(|&i| full.row(i).to_vec()).collect();
        let plain = oracle_block(&rows, &raw, 2);
        for (r, &i) in plain.iter().zip(&[0usize, 3, 4, 5]) {
            for (j, v) in r.iter().enumerate() {
                assert!((g.value(stacked).get(i, j) - v).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn single_token_single_head_attends_to_itself() {
        // One query, one key: weight 1, so output = residual + value path.
        let mut g = Graph::new();
        let x = g.constant(Tensor::row_vector(&[0.3, -1.2])).unwrap();
        let s = g.matmul_nt(x, x).unwrap();
        let a = g.softmax_rows(s).unwrap();
        assert_eq!(g.value(a).item(), 1.0);
    }

    #[test]
    fn patch_embedding_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let pos = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let img = Tensor::randn(&[1, 3], 1.0, &mut rng);
        let mut g = Graph::new();
        let pv = PatchEmbedVars {
            w: g.constant(w.clone()).unwrap(),
            b: g.constant(b.clone()).unwrap(),
            pos: g.constant(pos.clone()).unwrap(),
        };
        let iv = g.constant(img.clone()).unwrap();
        let out = patchify_embed(&mut g, iv, &pv).unwrap();
        let lin = crate::tensor::matmul(&img, &w).unwrap();
        for j in 0..4 {
            let expect = lin.data()[j] + b.data()[j] + pos.data()[j];
            assert!((g.value(out).data()[j] - expect).abs() < 1e-14);
        }

        let mut g = Graph::new();
        let pv = PatchEmbedVars {
            w: g.constant(w).unwrap(),
            b: g.constant(Tensor::zeros(&[1, 4])).unwrap(),
            pos: g.constant(Tensor::zeros(&[2, 4])).unwrap(),
        };
        let iv = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let out = patchify_embed(&mut g, iv, &pv).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_permutation_permutes_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let img = Tensor::randn(&[9, 2], 1.0, &mut rng);
        let perm = [4usize, 0, 8, 1, 7, 2, 6, 3, 5];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| img.row(i).to_vec()).collect();
        let permuted = Tensor::from_rows(&rows);

        let embed = |image: &Tensor| {
            let mut g = Graph::new();
            let pv = PatchEmbedVars {
                w: g.constant(w.clone()).unwrap(),
                b: g.constant(Tensor::zeros(&[1, 3])).unwrap(),
                pos: g.constant(Tensor::zeros(&[9, 3])).unwrap(),
            };
            let iv = g.constant(image.clone()).unwrap();
            let out = patchify_embed(&mut g, iv, &pv).unwrap();
            g.value(out).clone()
        };
        let a = embed(&img);
        let b = embed(&permuted);
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(b.row(k), a.row(i));
        }
    }

    #[test]
    fn patch_extent_mismatch_is_rejected() {
        let mut g = Graph::new();
        let pv = PatchEmbedVars {
            w: g.constant(Tensor::zeros(&[3, 4])).unwrap(),
            b: g.constant(Tensor::zeros(&[1, 4])).unwrap(),
            pos: g.constant(Tensor::zeros(&[4, 4])).unwrap(),
        };
        let iv = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(patchify_embed(&mut g, iv, &pv).is_err());
    }

    #[test]
    fn attention_csv_lists_every_weight() {
        let rec = AttentionRecord {
            site: Site::StrongVisual,
            part: AttnPart::Bias,
            layer: 5,
            head: 0,
            query_labels: vec!["vp".into()],
            key_labels: vec!["patch0".into(), "patch1".into()],
            weights: Tensor::row_vector(&[0.25, 0.75]),
        };
        let csv = attention_csv(&[rec]);
        assert_eq!(
            csv,
            "site,part,layer,head,query,key,weight\nsvpf,bias,5,0,vp,patch0,0.25\nsvpf,bias,5,0,vp,patch1,0.75\n"
        );
    }

    #[test]
    fn assemble_orders_tokens_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let parts: Vec<Tensor> = [[1, 3], [1, 3], [1, 3], [4, 3]]
            .iter()
            .map(|s| Tensor::randn(s, 1.0, &mut rng))
            .collect();
        let v: Vec<Var> = parts
            .iter()
            .map(|t| g.constant(t.clone()).unwrap())
            .collect();
        let seq = assemble_input(&g, v[0], v[1], v[2], v[3]).unwrap();
        assert_eq!(seq.layer_index, 0);
        let s = seq.stacked(&mut g).unwrap();
        assert_eq!(g.value(s).row(0), parts[0].data());
        assert_eq!(g.value(s).row(1), parts[1].data());
        assert_eq!(g.value(s).row(2), parts[2].data());
        let back = TokenSequence::split(&mut g, s, 0).unwrap();
        for (var, t) in [back.cls, back.vp, back.sp, back.patches]
            .iter()
            .zip(&parts)
        {
            assert_eq!(g.value(*var), t);
        }

        let bad = g.constant(Tensor::zeros(&[1, 2])).unwrap();
        assert!(assemble_input(&g, bad, v[1], v[2], v[3]).is_err());
        let short = g.constant(Tensor::zeros(&[3, 3])).unwrap();
        assert!(matches!(
            TokenSequence::split(&mut g, short, 0),
            Err(Error::Config(_))
        ));
    }
}
