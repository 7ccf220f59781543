//! Training objective: base loss (classification + attribute regression),
//! the cross-entropy-based divergence loss on the visual prompt, and the
//! semantic distillation loss on the semantic prompt.
//!
//! Every function builds nodes on a [`Graph`] so the total is
//! differentiable end to end. Vectors are `1 × D` rows.

use crate::autodiff::{Graph, Var};
use crate::config::{KlSource, LossWeights};
use crate::error::{Error, Result};

fn check_label(g: &Graph, logits: Var, y: usize) -> Result<()> {
    let n = g.value(logits).cols();
    if y >= n {
        return Err(Error::Label {
            label: y,
            classes: n,
        });
    }
    Ok(())
}

/// `−log softmax(logits)[y]` for a `1 × n` logit row.
pub fn cross_entropy(g: &mut Graph, logits: Var, y: usize) -> Result<Var> {
    check_label(g, logits, y)?;
    let ls = g.log_softmax_rows(logits)?;
    let picked = g.pick(ls, y)?;
    g.scale(picked, -1.0)
}

/// `KL(softmax(p) ‖ softmax(q))` for two `1 × n` rows.
pub fn kl_softmax(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    if g.shape(p) != g.shape(q) {
        return Err(Error::shape("kl_softmax", g.shape(p), g.shape(q)));
    }
    let lp = g.log_softmax_rows(p)?;
    let lq = g.log_softmax_rows(q)?;
    let pp = g.softmax_rows(p)?;
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(pp, diff)?;
    g.sum(terms)
}

/// Cross-entropy of `f_cls · protoᵀ` over the seen-class prototypes.
pub fn loss_cls(g: &mut Graph, f_cls: Var, prototypes: Var, y: usize) -> Result<Var> {
    let logits = g.matmul_nt(f_cls, prototypes)?;
    cross_entropy(g, logits, y)
}

/// `‖f_cls − ã_gt‖²` (sum, not mean).
pub fn loss_ar(g: &mut Graph, f_cls: Var, proto_gt: Var) -> Result<Var> {
    if g.shape(f_cls) != g.shape(proto_gt) {
        return Err(Error::shape("loss_ar", g.shape(f_cls), g.shape(proto_gt)));
    }
    let d = g.sub(f_cls, proto_gt)?;
    g.sum_squares(d)
}

/// `η₁ CE(f_vp W_c, y) + η₂ L_ED` with
/// `L_ED = ln((CE(f_vp W_c, y) + CE(f_cls W_c, y)) / max(KL, ε) + 1)`.
///
/// `KL` is `KL(softmax(f_vp) ‖ softmax(f_cls))` over the raw tokens, or over
/// their classifier logits with [`KlSource::Logits`].
#[allow(clippy::too_many_arguments)]
pub fn loss_ced(
    g: &mut Graph,
    f_vp: Var,
    f_cls: Var,
    w_c: Var,
    y: usize,
    weights: &LossWeights,
    kl_source: KlSource,
) -> Result<Var> {
    let vp_logits = g.matmul(f_vp, w_c)?;
    let cls_logits = g.matmul(f_cls, w_c)?;
    let ce_vp = cross_entropy(g, vp_logits, y)?;
    let ce_cls = cross_entropy(g, cls_logits, y)?;
    let kl = match kl_source {
        KlSource::Tokens => kl_softmax(g, f_vp, f_cls)?,
        KlSource::Logits => kl_softmax(g, vp_logits, cls_logits)?,
    };
    let kl = g.floor_max(kl, weights.eps_kl)?;
    let ce_sum = g.add(ce_vp, ce_cls)?;
    let ratio = g.div(ce_sum, kl)?;
    let ratio = g.add_scalar(ratio, 1.0)?;
    let ed = g.ln(ratio)?;
    let a = g.scale(ce_vp, weights.eta1)?;
    let b = g.scale(ed, weights.eta2)?;
    g.add(a, b)
}

/// `½KL(f_sp‖ã_y) + ½KL(ã_y‖f_sp) + ‖ã_gt − f_sp‖²`, KL over softmaxed rows.
pub fn loss_skd(g: &mut Graph, f_sp: Var, proto_y: Var, proto_gt: Var) -> Result<Var> {
    if g.shape(f_sp) != g.shape(proto_y) || g.shape(f_sp) != g.shape(proto_gt) {
        return Err(Error::shape("loss_skd", g.shape(f_sp), g.shape(proto_y)));
    }
    let fwd = kl_softmax(g, f_sp, proto_y)?;
    let bwd = kl_softmax(g, proto_y, f_sp)?;
    let sym = g.add(fwd, bwd)?;
    let sym = g.scale(sym, 0.5)?;
    let d = g.sub(proto_gt, f_sp)?;
    let sq = g.sum_squares(d)?;
    g.add(sym, sq)
}

/// Per-component values of the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub cls: T,
    pub ar: T,
    pub ced: T,
    pub skd: T,
    pub total: T,
}

impl LossBreakdown<Var> {
    pub fn values(&self, g: &Graph) -> LossBreakdown<f64> {
        LossBreakdown {
            cls: g.value(self.cls).item(),
            ar: g.value(self.ar).item(),
            ced: g.value(self.ced).item(),
            skd: g.value(self.skd).item(),
            total: g.value(self.total).item(),
        }
    }
}

/// Final tokens and targets for one sample.
pub struct LossInputs {
    pub f_cls: Var,
    pub f_vp: Var,
    pub f_sp: Var,
    /// Seen-class prototypes `N_s × D`.
    pub prototypes: Var,
    pub w_c: Var,
    pub label: usize,
}

/// Which optional terms exist; a prompt that is switched off has no loss.
#[derive(Clone, Copy, Debug)]
pub struct ActiveTerms {
    pub ced: bool,
    pub skd: bool,
}

/// `L_CLS + γ L_AR + λ_CED L_CED + λ_SKD L_SKD`.
pub fn loss_total(
    g: &mut Graph,
    inp: &LossInputs,
    weights: &LossWeights,
    kl_source: KlSource,
    active: ActiveTerms,
) -> Result<LossBreakdown<Var>> {
    let n_s = g.value(inp.prototypes).rows();
    if inp.label >= n_s {
        return Err(Error::Label {
            label: inp.label,
            classes: n_s,
        });
    }
    let proto_gt = g.slice_rows(inp.prototypes, inp.label, 1)?;
    let cls = loss_cls(g, inp.f_cls, inp.prototypes, inp.label)?;
    let ar = loss_ar(g, inp.f_cls, proto_gt)?;
    let zero = || -> Result<f64> { Ok(0.0) };
    let ced = if active.ced {
        loss_ced(
            g, inp.f_vp, inp.f_cls, inp.w_c, inp.label, weights, kl_source,
        )?
    } else {
        g.constant(crate::tensor::Tensor::scalar(zero()?))?
    };
    let skd = if active.skd {
        loss_skd(g, inp.f_sp, proto_gt, proto_gt)?
    } else {
        g.constant(crate::tensor::Tensor::scalar(0.0))?
    };
    let ar_w = g.scale(ar, weights.gamma)?;
    let ced_w = g.scale(ced, weights.lambda_ced)?;
    let skd_w = g.scale(skd, weights.lambda_skd)?;
    let t = g.add(cls, ar_w)?;
    let t = g.add(t, ced_w)?;
    let total = g.add(t, skd_w)?;
    Ok(LossBreakdown {
        cls,
        ar,
        ced,
        skd,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn row(g: &mut Graph, v: &[f64]) -> Var {
        g.constant(Tensor::row_vector(v)).unwrap()
    }

    // --- independent scalar oracles -------------------------------------

    fn lse(x: &[f64]) -> f64 {
        let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
    }

    fn softmax(x: &[f64]) -> Vec<f64> {
        let l = lse(x);
        x.iter().map(|v| (v - l).exp()).collect()
    }

    fn kl(p: &[f64], q: &[f64]) -> f64 {
        let (a, b) = (softmax(p), softmax(q));
        a.iter().zip(&b).map(|(x, y)| x * (x.ln() - y.ln())).sum()
    }

    fn dot_rows(v: &[f64], m: &[Vec<f64>]) -> Vec<f64> {
        m.iter()
            .map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn times(v: &[f64], w: &[Vec<f64>]) -> Vec<f64> {
        (0..w[0].len())
            .map(|j| (0..v.len()).map(|i| v[i] * w[i][j]).sum())
            .collect()
    }

    fn ce(logits: &[f64], y: usize) -> f64 {
        lse(logits) - logits[y]
    }

    #[test]
    fn cls_two_equal_logits_is_ln2() {
        let mut g = Graph::new();
        let f = row(&mut g, &[1.0, 0.0]);
        let protos = g
            .constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]))
            .unwrap();
        let l = loss_cls(&mut g, f, protos, 1).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cls_large_margin_goes_to_zero() {
        let mut g = Graph::new();
        let f = row(&mut g, &[50.0, 0.0]);
        let protos = g
            .constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]))
            .unwrap();
        let l = loss_cls(&mut g, f, protos, 0).unwrap();
        assert!(g.value(l).item() < 1e-20);
    }

    #[test]
    fn cls_matches_log_sum_exp_oracle() {
        let f = [0.3, -1.1, 2.0];
        let protos = vec![
            vec![1.0, 0.5, -0.2],
            vec![-0.4, 0.9, 0.1],
            vec![0.0, -1.0, 0.7],
        ];
        let expect = ce(&dot_rows(&f, &protos), 2);
        let mut g = Graph::new();
        let fv = row(&mut g, &f);
        let pv = g.constant(Tensor::from_rows(&protos)).unwrap();
        let l = loss_cls(&mut g, fv, pv, 2).unwrap();
        assert!((g.value(l).item() - expect).abs() <= 1e-12);
    }

    #[test]
    fn cls_uniform_logits_give_ln_n() {
        for n in [2usize, 3, 7, 12] {
            let mut g = Graph::new();
            let f = row(&mut g, &[0.0, 0.0]);
            let protos = g
                .constant(Tensor::randn(
                    &[n, 2],
                    1.0,
                    &mut ChaCha8Rng::seed_from_u64(n as u64),
                ))
                .unwrap();
            let l = loss_cls(&mut g, f, protos, n - 1).unwrap();
            assert!((g.value(l).item() - (n as f64).ln()).abs() <= 1e-9);
        }
    }

    #[test]
    fn cls_label_out_of_range() {
        let mut g = Graph::new();
        let f = row(&mut g, &[1.0]);
        let protos = g
            .constant(Tensor::from_rows(&[vec![1.0], vec![2.0]]))
            .unwrap();
        assert!(matches!(
            loss_cls(&mut g, f, protos, 2),
            Err(Error::Label {
                label: 2,
                classes: 2
            })
        ));
    }

    #[test]
    fn ar_cases() {
        let mut g = Graph::new();
        let a = row(&mut g, &[1.0, 2.0]);
        let l = loss_ar(&mut g, a, a).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let b = row(&mut g, &[4.0, 6.0]);
        let l = loss_ar(&mut g, b, a).unwrap();
        assert_eq!(g.value(l).item(), 25.0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[1, 16], 1.0, &mut rng);
        let y = Tensor::randn(&[1, 16], 1.0, &mut rng);
        let mut expect = 0.0;
        for i in 0..16 {
            expect += (x.data()[i] - y.data()[i]).powi(2);
        }
        let xv = g.constant(x).unwrap();
        let yv = g.constant(y).unwrap();
        let l = loss_ar(&mut g, xv, yv).unwrap();
        assert!((g.value(l).item() - expect).abs() <= 1e-12);

        let c = row(&mut g, &[1.0, 2.0, 3.0]);
        assert!(loss_ar(&mut g, a, c).is_err());
    }

    fn toy_wc() -> Vec<Vec<f64>> {
        vec![
            vec![0.5, -0.3, 0.2],
            vec![-0.1, 0.8, 0.4],
            vec![0.3, 0.3, -0.6],
            vec![0.9, -0.2, 0.1],
        ]
    }

    #[test]
    fn ced_matches_formula_oracle() {
        let f_vp = [0.2, -0.5, 1.0, 0.3];
        let f_cls = [1.1, 0.4, -0.7, 0.0];
        let w = toy_wc();
        let weights = LossWeights {
            eta1: 0.7,
            eta2: 1.3,
            ..LossWeights::default()
        };
        let y = 1;
        let ce_vp = ce(&times(&f_vp, &w), y);
        let ce_cls = ce(&times(&f_cls, &w), y);
        let ed = ((ce_vp + ce_cls) / kl(&f_vp, &f_cls).max(1e-8) + 1.0).ln();
        let expect = 0.7 * ce_vp + 1.3 * ed;

        let mut g = Graph::new();
        let a = row(&mut g, &f_vp);
        let b = row(&mut g, &f_cls);
        let wc = g.constant(Tensor::from_rows(&w)).unwrap();
        let l = loss_ced(&mut g, a, b, wc, y, &weights, KlSource::Tokens).unwrap();
        assert!((g.value(l).item() - expect).abs() <= 1e-10);

        let ed_logits =
            ((ce_vp + ce_cls) / kl(&times(&f_vp, &w), &times(&f_cls, &w)).max(1e-8) + 1.0).ln();
        let l = loss_ced(&mut g, a, b, wc, y, &weights, KlSource::Logits).unwrap();
        assert!((g.value(l).item() - (0.7 * ce_vp + 1.3 * ed_logits)).abs() <= 1e-10);
    }

    #[test]
    fn ced_identical_tokens_hit_the_floor() {
        let f = [0.2, -0.5, 1.0, 0.3];
        let w = toy_wc();
        let weights = LossWeights {
            eta1: 0.0,
            ..LossWeights::default()
        };
        let c = ce(&times(&f, &w), 0);
        let expect = (2.0 * c / weights.eps_kl + 1.0).ln();
        let mut g = Graph::new();
        let a = row(&mut g, &f);
        let wc = g.constant(Tensor::from_rows(&w)).unwrap();
        let l = loss_ced(&mut g, a, a, wc, 0, &weights, KlSource::Tokens).unwrap();
        assert!((g.value(l).item() - expect).abs() <= 1e-10);
        assert!(g.value(l).item() > 15.0);
    }

    #[test]
    fn ced_zero_weights_vanish() {
        let weights = LossWeights {
            eta1: 0.0,
            eta2: 0.0,
            ..LossWeights::default()
        };
        let mut g = Graph::new();
        let a = row(&mut g, &[0.1, 0.2, 0.3, 0.4]);
        let b = row(&mut g, &[0.4, 0.1, 0.0, -0.4]);
        let wc = g.constant(Tensor::from_rows(&toy_wc())).unwrap();
        let l = loss_ced(&mut g, a, b, wc, 2, &weights, KlSource::Tokens).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn divergence_term_decreases_with_kl() {
        // ln(C / KL + 1) at fixed C is strictly decreasing in KL.
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(1.7)).unwrap();
        let mut prev = f64::INFINITY;
        for k in [1e-6, 1e-3, 0.01, 0.1, 0.5, 1.0, 3.0] {
            let kv = g.constant(Tensor::scalar(k)).unwrap();
            let kv = g.floor_max(kv, 1e-8).unwrap();
            let r = g.div(c, kv).unwrap();
            let r = g.add_scalar(r, 1.0).unwrap();
            let ed = g.ln(r).unwrap();
            let v = g.value(ed).item();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn skd_cases() {
        let mut g = Graph::new();
        let a = row(&mut g, &[0.3, -0.2, 0.9, 0.1]);
        let l = loss_skd(&mut g, a, a, a).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let f = [0.3, -0.2, 0.9, 0.1];
        let p = [1.0, 0.4, -0.3, 0.2];
        let gt = [0.8, 0.5, -0.1, 0.0];
        let expect = 0.5 * kl(&f, &p)
            + 0.5 * kl(&p, &f)
            + gt.iter().zip(&f).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let fv = row(&mut g, &f);
        let pv = row(&mut g, &p);
        let gv = row(&mut g, &gt);
        let l = loss_skd(&mut g, fv, pv, gv).unwrap();
        assert!((g.value(l).item() - expect).abs() <= 1e-10);

        // Symmetric KL part: swap f and the prototype with gt = f, then gt = p.
        let l1 = loss_skd(&mut g, fv, pv, fv).unwrap();
        let l2 = loss_skd(&mut g, pv, fv, pv).unwrap();
        assert!((g.value(l1).item() - g.value(l2).item()).abs() <= 1e-12);
        assert!(g.value(l1).item() > 0.0);
    }

    #[test]
    fn total_reduces_to_cls_and_sums_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::new();
        let f_cls = g.constant(Tensor::randn(&[1, 4], 1.0, &mut rng)).unwrap();
        let f_vp = g.constant(Tensor::randn(&[1, 4], 1.0, &mut rng)).unwrap();
        let f_sp = g.constant(Tensor::randn(&[1, 4], 1.0, &mut rng)).unwrap();
        let prototypes = g.constant(Tensor::randn(&[3, 4], 1.0, &mut rng)).unwrap();
        let w_c = g.constant(Tensor::randn(&[4, 3], 1.0, &mut rng)).unwrap();
        let inp = LossInputs {
            f_cls,
            f_vp,
            f_sp,
            prototypes,
            w_c,
            label: 1,
        };
        let all = ActiveTerms {
            ced: true,
            skd: true,
        };
        let zero = LossWeights {
            gamma: 0.0,
            lambda_ced: 0.0,
            lambda_skd: 0.0,
            ..LossWeights::default()
        };
        let b = loss_total(&mut g, &inp, &zero, KlSource::Tokens, all)
            .unwrap()
            .values(&g);
        let only_cls = loss_cls(&mut g, f_cls, prototypes, 1).unwrap();
        assert_eq!(b.total, g.value(only_cls).item());

        let ones = LossWeights {
            gamma: 1.0,
            eta1: 1.0,
            eta2: 1.0,
            lambda_ced: 1.0,
            lambda_skd: 1.0,
            eps_kl: 1e-8,
        };
        let b = loss_total(&mut g, &inp, &ones, KlSource::Tokens, all)
            .unwrap()
            .values(&g);
        let proto_gt = g.slice_rows(prototypes, 1, 1).unwrap();
        let parts = [
            loss_cls(&mut g, f_cls, prototypes, 1).unwrap(),
            loss_ar(&mut g, f_cls, proto_gt).unwrap(),
            loss_ced(&mut g, f_vp, f_cls, w_c, 1, &ones, KlSource::Tokens).unwrap(),
            loss_skd(&mut g, f_sp, proto_gt, proto_gt).unwrap(),
        ];
        let sum: f64 = parts.iter().map(|&p| g.value(p).item()).sum();
        assert!((b.total - sum).abs() <= 1e-12);

        let off = ActiveTerms {
            ced: false,
            skd: false,
        };
        let b = loss_total(&mut g, &inp, &ones, KlSource::Tokens, off)
            .unwrap()
            .values(&g);
        assert_eq!((b.ced, b.skd), (0.0, 0.0));
    }

    proptest::proptest! {
        #[test]
        fn symmetric_kl_is_nonnegative_and_symmetric(
            a in proptest::collection::vec(-4.0f64..4.0, 5),
            b in proptest::collection::vec(-4.0f64..4.0, 5),
        ) {
            let mut g = Graph::new();
            let av = row(&mut g, &a);
            let bv = row(&mut g, &b);
            let ab = kl_softmax(&mut g, av, bv).unwrap();
            let ba = kl_softmax(&mut g, bv, av).unwrap();
            let s1 = g.value(ab).item() + g.value(ba).item();
            proptest::prop_assert!(s1 >= -1e-12);
            let aa = kl_softmax(&mut g, av, av).unwrap();
            proptest::prop_assert!(g.value(aa).item().abs() <= 1e-12);
        }
    }
}
