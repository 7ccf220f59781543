//! The model as a whole: parameters plus the settings the forward pass and
//! objective need, with helpers to build per-batch loss graphs and to embed
//! images for evaluation.

use rand::Rng;

use crate::attributes::{embed_prototypes, embed_prototypes_var};
use crate::autodiff::{Graph, Var};
use crate::backbone::AttentionRecord;
use crate::config::RunConfig;
use crate::data::{GzslDataset, Sample};
use crate::error::{Error, Result};
use crate::fusion::{forward_vspcn, ForwardSettings};
use crate::gradcheck::{fd_gradient, max_relative_error};
use crate::losses::{loss_total, ActiveTerms, LossBreakdown, LossInputs};
use crate::params::ModelParams;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Vspcn {
    pub config: RunConfig,
    pub params: ModelParams,
}

/// A batch loss graph: the mean total, the mean components, and the
/// parameter vars in layout order.
pub struct BatchGraph {
    pub graph: Graph,
    pub vars: Vec<Var>,
    pub total: Var,
    pub mean: LossBreakdown<f64>,
}

impl Vspcn {
    pub fn init(
        config: &RunConfig,
        n_attr: usize,
        n_seen: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Vspcn {
            config: config.clone(),
            params: ModelParams::init(&config.model, n_attr, n_seen, rng),
        })
    }

    pub fn settings(&self) -> ForwardSettings {
        ForwardSettings::from_config(&self.config)
    }

    pub fn active_terms(&self) -> ActiveTerms {
        ActiveTerms {
            ced: self.config.toggles.pv,
            skd: self.config.toggles.ps,
        }
    }

    /// Checks that the dataset's shapes fit this model.
    pub fn check_dataset(&self, data: &GzslDataset) -> Result<()> {
        let m = &self.config.model;
        let ids = self.params.ids();
        let w_d = self.params.get(ids.w_d).shape();
        let w_c = self.params.get(ids.w_c).shape();
        let checks = [
            ("attribute dimension", data.attributes.dim(), m.d_model),
            ("attribute count", data.n_attr(), w_d[0]),
            ("seen classes", data.n_seen, w_c[1]),
            ("patches", data.num_patches(), m.num_patches()),
            ("patch dimension", data.patch_dim, m.patch_dim),
        ];
        for (what, found, expected) in checks {
            if found != expected {
                return Err(Error::Config(format!(
                    "dataset {what} is {found}, model expects {expected}"
                )));
            }
        }
        Ok(())
    }

    /// Mean loss over `batch` on a fresh graph, parameters as grad leaves.
    pub fn batch_graph(&self, data: &GzslDataset, batch: &[&Sample]) -> Result<BatchGraph> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, true)?;
        let ids = self.params.ids();
        let settings = self.settings();
        let attrs0 = g.constant(data.attributes.vectors.clone())?;
        let seen_attrs = g.constant(data.seen_class_attrs())?;
        let prototypes = embed_prototypes_var(&mut g, seen_attrs, vars[ids.w_d])?;
        let active = self.active_terms();

        let mut totals = Vec::with_capacity(batch.len());
        let mut sums = [0.0; 5];
        for sample in batch {
            if sample.label >= data.n_seen {
                return Err(Error::Label {
                    label: sample.label,
                    classes: data.n_seen,
                });
            }
            let image = g.constant(sample.patches.clone())?;
            let out = forward_vspcn(&mut g, image, attrs0, ids, &vars, &settings, None)?;
            let inp = LossInputs {
                f_cls: out.tokens.cls,
                f_vp: out.tokens.vp,
                f_sp: out.tokens.sp,
                prototypes,
                w_c: vars[ids.w_c],
                label: sample.label,
            };
            let parts = loss_total(
                &mut g,
                &inp,
                &self.config.loss,
                self.config.kl_source,
                active,
            )?;
            let v = parts.values(&g);
            for (s, x) in sums.iter_mut().zip([v.cls, v.ar, v.ced, v.skd, v.total]) {
                *s += x;
            }
            totals.push(parts.total);
        }
        let n = batch.len() as f64;
        let stacked = g.concat_rows(&totals)?;
        let sum = g.sum(stacked)?;
        let total = g.scale(sum, 1.0 / n)?;
        let mean = LossBreakdown {
            cls: sums[0] / n,
            ar: sums[1] / n,
            ced: sums[2] / n,
            skd: sums[3] / n,
            total: sums[4] / n,
        };
        Ok(BatchGraph {
            graph: g,
            vars,
            total,
            mean,
        })
    }

    /// Embedded prototypes of every class, `N_c × D`.
    pub fn prototypes(&self, data: &GzslDataset) -> Result<Tensor> {
        embed_prototypes(&data.class_attrs, self.params.get(self.params.ids().w_d))
    }

    fn run(
        &self,
        data: &GzslDataset,
        image: &Tensor,
        records: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false)?;
        let attrs0 = g.constant(data.attributes.vectors.clone())?;
        let image = g.constant(image.clone())?;
        let out = forward_vspcn(
            &mut g,
            image,
            attrs0,
            self.params.ids(),
            &vars,
            &self.settings(),
            records,
        )?;
        Ok(g.value(out.tokens.cls).clone())
    }

    /// Final CLS feature `f_cls^M` (`1 × D`) of one image.
    pub fn embed(&self, data: &GzslDataset, image: &Tensor) -> Result<Tensor> {
        self.run(data, image, None)
    }

    /// Every attention matrix of one forward pass.
    pub fn attention(&self, data: &GzslDataset, image: &Tensor) -> Result<Vec<AttentionRecord>> {
        let mut records = Vec::new();
        self.run(data, image, Some(&mut records))?;
        Ok(records)
    }
}

/// Analytic versus finite-difference gradient of one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    /// Worst element-wise relative error.
    pub max_rel_err: f64,
    /// Worst element-wise absolute error.
    pub max_abs_err: f64,
    /// `‖a − fd‖ / max(‖a‖, ‖fd‖, 1e-8)` over the whole tensor.
    pub norm_rel_err: f64,
    pub grad_norm: f64,
}

impl Vspcn {
    /// Compares tape gradients of the mean batch loss with central
    /// differences of step `h`, tensor by tensor.
    pub fn gradient_check(
        &self,
        data: &GzslDataset,
        batch: &[&Sample],
        h: f64,
    ) -> Result<Vec<ParamCheck>> {
        let bg = self.batch_graph(data, batch)?;
        let grads = bg.graph.backward(bg.total)?;
        let numeric = fd_gradient(
            |ts: &[Tensor]| {
                let m = Vspcn {
                    config: self.config.clone(),
                    params: self.params.with_tensors(ts.to_vec())?,
                };
                let b = m.batch_graph(data, batch)?;
                Ok(b.graph.value(b.total).clone())
            },
            &self.params.tensors,
            h,
        )?;
        Ok(self
            .params
            .layout
            .specs
            .iter()
            .zip(&bg.vars)
            .zip(&numeric)
            .map(|((spec, &v), fd)| {
                let analytic = grads.get_or_zeros(v, fd);
                let diff = analytic.zip_map(fd, |a, b| a - b).norm();
                ParamCheck {
                    name: spec.name.clone(),
                    max_rel_err: max_relative_error(&analytic, fd),
                    max_abs_err: analytic.max_abs_diff(fd),
                    norm_rel_err: diff / analytic.norm().max(fd.norm()).max(1e-8),
                    grad_norm: analytic.norm(),
                }
            })
            .collect())
    }
}
