//! Learnable parameters, stored as one flat list of named tensors.
//!
//! [`ParamIds`] gives typed handles into that list so forward code can say
//! `ids.blocks[3].w_qkv` while the optimizer and checkpoint code just walk
//! the list.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decides optimizer treatment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Linear-map weights; the only kind subject to weight decay.
    Matrix,
    Bias,
    Norm,
    Prompt,
    Embedding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockIds {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    /// Query and value biases; a key bias would cancel in the softmax.
    pub b_q: usize,
    pub b_v: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_1: usize,
    pub b_1: usize,
    pub w_2: usize,
    pub b_2: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjIds {
    pub q: usize,
    pub k: usize,
    pub v: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionIds {
    pub wvpf: ProjIds,
    pub wspf: ProjIds,
    pub svpf: ProjIds,
    pub sspf: ProjIds,
    pub adapter: ProjIds,
    pub beta_v: usize,
    pub beta_s: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamIds {
    pub cls: usize,
    pub vp: usize,
    pub sp: usize,
    pub patch_w: usize,
    pub patch_b: usize,
    pub pos: usize,
    pub blocks: Vec<BlockIds>,
    pub fusion: FusionIds,
    /// Attribute embedding `N_a × D`.
    pub w_d: usize,
    /// Prompt classifier `D × N_s`.
    pub w_c: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayout {
    pub specs: Vec<ParamSpec>,
    pub ids: ParamIds,
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn add(&mut self, name: impl Into<String>, kind: ParamKind, shape: &[usize]) -> usize {
        self.specs.push(ParamSpec {
            name: name.into(),
            kind,
            shape: shape.to_vec(),
        });
        self.specs.len() - 1
    }

    fn proj(&mut self, site: &str, d: usize) -> ProjIds {
        ProjIds {
            q: self.add(format!("fusion.{site}.q"), ParamKind::Matrix, &[d, d]),
            k: self.add(format!("fusion.{site}.k"), ParamKind::Matrix, &[d, d]),
            v: self.add(format!("fusion.{site}.v"), ParamKind::Matrix, &[d, d]),
        }
    }
}

impl ParamLayout {
    pub fn new(model: &ModelConfig, n_attr: usize, n_seen: usize) -> Self {
        use ParamKind::*;
        let d = model.d_model;
        let hidden = d * model.mlp_ratio;
        let mut b = LayoutBuilder { specs: Vec::new() };
        let cls = b.add("cls", Prompt, &[1, d]);
        let vp = b.add("vp", Prompt, &[1, d]);
        let sp = b.add("sp", Prompt, &[1, d]);
        let patch_w = b.add("patch.w", Matrix, &[model.patch_dim, d]);
        let patch_b = b.add("patch.b", Bias, &[1, d]);
        let pos = b.add("patch.pos", Embedding, &[model.num_patches(), d]);
        let blocks = (0..model.depth)
            .map(|i| BlockIds {
                ln1_g: b.add(format!("block{i}.ln1_g"), Norm, &[1, d]),
                ln1_b: b.add(format!("block{i}.ln1_b"), Norm, &[1, d]),
                w_qkv: b.add(format!("block{i}.w_qkv"), Matrix, &[d, 3 * d]),
                b_q: b.add(format!("block{i}.b_q"), Bias, &[1, d]),
                b_v: b.add(format!("block{i}.b_v"), Bias, &[1, d]),
                w_o: b.add(format!("block{i}.w_o"), Matrix, &[d, d]),
                b_o: b.add(format!("block{i}.b_o"), Bias, &[1, d]),
                ln2_g: b.add(format!("block{i}.ln2_g"), Norm, &[1, d]),
                ln2_b: b.add(format!("block{i}.ln2_b"), Norm, &[1, d]),
                w_1: b.add(format!("block{i}.w_1"), Matrix, &[d, hidden]),
                b_1: b.add(format!("block{i}.b_1"), Bias, &[1, hidden]),
                w_2: b.add(format!("block{i}.w_2"), Matrix, &[hidden, d]),
                b_2: b.add(format!("block{i}.b_2"), Bias, &[1, d]),
            })
            .collect();
        let fusion = FusionIds {
            wvpf: b.proj("wvpf", d),
            wspf: b.proj("wspf", d),
            svpf: b.proj("svpf", d),
            sspf: b.proj("sspf", d),
            adapter: b.proj("adapter", d),
            beta_v: b.add("fusion.beta_v", Matrix, &[d, 1]),
            beta_s: b.add("fusion.beta_s", Matrix, &[d, 1]),
        };
        let w_d = b.add("w_d", Matrix, &[n_attr, d]);
        let w_c = b.add("w_c", Matrix, &[d, n_seen]);
        ParamLayout {
            specs: b.specs,
            ids: ParamIds {
                cls,
                vp,
                sp,
                patch_w,
                patch_b,
                pos,
                blocks,
                fusion,
                w_d,
                w_c,
            },
        }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub layout: ParamLayout,
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Random initialisation: fan-in scaled Gaussians for linear maps,
    /// zero biases, unit norm scales and small Gaussian prompts.
    pub fn init(model: &ModelConfig, n_attr: usize, n_seen: usize, rng: &mut impl Rng) -> Self {
        let layout = ParamLayout::new(model, n_attr, n_seen);
        let tensors = layout
            .specs
            .iter()
            .map(|spec| {
                let shape = &spec.shape;
                match spec.kind {
                    ParamKind::Matrix => {
                        let fan_in = shape[0] as f64;
                        Tensor::randn(shape, 1.0 / fan_in.sqrt(), rng)
                    }
                    ParamKind::Bias => Tensor::zeros(shape),
                    ParamKind::Norm if spec.name.ends_with("_g") => Tensor::full(shape, 1.0),
                    ParamKind::Norm => Tensor::zeros(shape),
                    ParamKind::Prompt | ParamKind::Embedding => {
                        Tensor::randn(shape, model.prompt_init_std, rng)
                    }
                }
            })
            .collect();
        ModelParams { layout, tensors }
    }

    pub fn ids(&self) -> &ParamIds {
        &self.layout.ids
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.layout.position(name).map(|i| &self.tensors[i])
    }

    /// Puts every tensor on `g` as a leaf; returned vars share indices
    /// with [`ModelParams::tensors`].
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Result<Vec<Var>> {
        self.tensors
            .iter()
            .map(|t| g.leaf(t.clone(), requires_grad))
            .collect()
    }

    /// Replaces all tensors, checking each against the layout.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != self.layout.len() {
            return Err(Error::Contract(format!(
                "expected {} tensors, got {}",
                self.layout.len(),
                tensors.len()
            )));
        }
        for (spec, t) in self.layout.specs.iter().zip(&tensors) {
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::TensorShape {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(ModelParams {
            layout: self.layout.clone(),
            tensors,
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}
