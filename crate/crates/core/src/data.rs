//! Synthetic GZSL datasets and their binary file format.
//!
//! Classes are described by sparse nonnegative attribute vectors. Every
//! image is a grid of patches; patch `p` of an image of class `y` is
//! `a_y · R_p + noise`, with one fixed random rendering matrix `R_p` per
//! grid position. Visual appearance is therefore a linear function of the
//! attributes, which is what makes transfer to unseen classes possible.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "VSPD"  u16 version (=1)
//! u64 n_seen, n_unseen, n_attr, attr_dim, grid_rows, grid_cols, patch_dim
//! n_attr × (u32 len, UTF-8 name)
//! f64[n_attr × attr_dim]              attribute word vectors S
//! f64[(n_seen + n_unseen) × n_attr]   class attribute vectors
//! 3 × { u64 count, count × (u64 label, f64[grid_rows·grid_cols × patch_dim]) }
//!                                     train (seen), test seen, test unseen
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attributes::AttributeMatrix;
use crate::binio::{Reader, Writer};
use crate::config::{DataConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: [u8; 4] = *b"VSPD";
pub const DATASET_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub label: usize,
    /// `N_v × patch_dim`, patches in row-major grid order.
    pub patches: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GzslDataset {
    pub n_seen: usize,
    pub n_unseen: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_dim: usize,
    /// Shared attribute word vectors `S` (`N_a × D`).
    pub attributes: AttributeMatrix,
    /// Per-class attribute vectors (`N_c × N_a`); seen classes come first.
    pub class_attrs: Tensor,
    pub train: Vec<Sample>,
    pub test_seen: Vec<Sample>,
    pub test_unseen: Vec<Sample>,
}

/// Generator settings beyond [`DataConfig`] that come from the model.
#[derive(Clone, Copy, Debug)]
pub struct RenderShape {
    pub attr_dim: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_dim: usize,
}

impl RenderShape {
    /// The shape a model built from `m` consumes.
    pub fn for_model(m: &ModelConfig) -> Self {
        RenderShape {
            attr_dim: m.d_model,
            grid_rows: m.grid_rows,
            grid_cols: m.grid_cols,
            patch_dim: m.patch_dim,
        }
    }
}

impl GzslDataset {
    pub fn n_classes(&self) -> usize {
        self.n_seen + self.n_unseen
    }

    pub fn n_attr(&self) -> usize {
        self.attributes.len()
    }

    pub fn num_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn seen_labels(&self) -> std::ops::Range<usize> {
        0..self.n_seen
    }

    pub fn unseen_labels(&self) -> std::ops::Range<usize> {
        self.n_seen..self.n_classes()
    }

    pub fn is_unseen(&self, label: usize) -> bool {
        label >= self.n_seen
    }

    /// Attribute rows of the seen classes.
    pub fn seen_class_attrs(&self) -> Tensor {
        self.class_attrs
            .slice_rows(0, self.n_seen)
            .expect("at least one seen class")
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::header(&DATASET_MAGIC, DATASET_VERSION);
        for e in [
            self.n_seen,
            self.n_unseen,
            self.n_attr(),
            self.attributes.dim(),
            self.grid_rows,
            self.grid_cols,
            self.patch_dim,
        ] {
            w.usize(e);
        }
        for name in &self.attributes.names {
            w.str(name);
        }
        w.f64s(self.attributes.vectors.data());
        w.f64s(self.class_attrs.data());
        for split in [&self.train, &self.test_seen, &self.test_unseen] {
            w.usize(split.len());
            for s in split {
                w.usize(s.label);
                w.f64s(s.patches.data());
            }
        }
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.header(&DATASET_MAGIC, DATASET_VERSION)?;
        let n_seen = r.extent("n_seen")?;
        let n_unseen = r.extent("n_unseen")?;
        let n_attr = r.extent("n_attr")?;
        let attr_dim = r.extent("attr_dim")?;
        let grid_rows = r.extent("grid_rows")?;
        let grid_cols = r.extent("grid_cols")?;
        let patch_dim = r.extent("patch_dim")?;
        if [
            n_seen, n_unseen, n_attr, attr_dim, grid_rows, grid_cols, patch_dim,
        ]
        .contains(&0)
        {
            return Err(Error::Malformed("dataset extents must be positive".into()));
        }
        let n_classes = n_seen
            .checked_add(n_unseen)
            .ok_or_else(|| Error::Malformed("class count overflows".into()))?;
        let mul = |a: usize, b: usize, what: &str| {
            a.checked_mul(b)
                .ok_or_else(|| Error::Malformed(format!("{what} size overflows")))
        };

        // Each name costs at least its 4-byte length prefix.
        if n_attr > r.remaining() / 4 {
            return Err(Error::Truncated {
                what: "attribute names".into(),
            });
        }
        let mut names = Vec::with_capacity(n_attr);
        for _ in 0..n_attr {
            names.push(r.str("attribute name")?);
        }
        let s = r.f64s(
            mul(n_attr, attr_dim, "attribute matrix")?,
            "attribute matrix",
        )?;
        let s = Tensor::new(&[n_attr, attr_dim], s)?;
        let attributes = AttributeMatrix::new(names, s)
            .map_err(|_| Error::Malformed("non-finite attribute vectors".into()))?;
        let a = r.f64s(
            mul(n_classes, n_attr, "class attributes")?,
            "class attributes",
        )?;
        let class_attrs = Tensor::new(&[n_classes, n_attr], a)?
            .check_finite("class attributes")
            .map_err(|_| Error::Malformed("non-finite class attributes".into()))?;

        let n_v = mul(grid_rows, grid_cols, "grid")?;
        let per_image = mul(n_v, patch_dim, "image")?;
        let record = mul(per_image, 8, "image")?
            .checked_add(8)
            .ok_or_else(|| Error::Malformed("image size overflows".into()))?;
        let mut read_split = |what: &str, labels: std::ops::Range<usize>| -> Result<Vec<Sample>> {
            let count = r.extent(what)?;
            if count > r.remaining() / record {
                return Err(Error::Truncated { what: what.into() });
            }
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                let label = r.extent("label")?;
                if !labels.contains(&label) {
                    return Err(Error::Malformed(format!(
                        "{what}: label {label} outside {labels:?}"
                    )));
                }
                let data = r.f64s(per_image, what)?;
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Malformed(format!("{what}: non-finite pixel")));
                }
                out.push(Sample {
                    label,
                    patches: Tensor::new(&[n_v, patch_dim], data)?,
                });
            }
            Ok(out)
        };
        let train = read_split("train split", 0..n_seen)?;
        let test_seen = read_split("seen test split", 0..n_seen)?;
        let test_unseen = read_split("unseen test split", n_seen..n_classes)?;
        r.finish()?;
        Ok(GzslDataset {
            n_seen,
            n_unseen,
            grid_rows,
            grid_cols,
            patch_dim,
            attributes,
            class_attrs,
            train,
            test_seen,
            test_unseen,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Draws distinct sparse attribute vectors for all classes.
fn class_attribute_vectors(cfg: &DataConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n_c = cfg.n_classes();
    let n_a = cfg.n_attr;
    let k = cfg.active_attrs();
    let need_cover = cfg.n_seen * k >= n_a;
    for _attempt in 0..1000 {
        let mut supports: BTreeSet<Vec<usize>> = BTreeSet::new();
        let mut rows = Vec::with_capacity(n_c);
        let mut guard = 0;
        while rows.len() < n_c {
            guard += 1;
            if guard > 100 * n_c {
                break;
            }
            let mut support = index::sample(rng, n_a, k).into_vec();
            support.sort_unstable();
            if supports.insert(support.clone()) {
                rows.push(support);
            }
        }
        if rows.len() < n_c {
            continue;
        }
        // Unseen classes should be recombinations of attributes seen in training.
        let covered: BTreeSet<usize> = rows[..cfg.n_seen].iter().flatten().copied().collect();
        if need_cover && covered.len() < n_a {
            continue;
        }
        let mut a = Tensor::zeros(&[n_c, n_a]);
        for (c, support) in rows.iter().enumerate() {
            for &j in support {
                a.data_mut()[c * n_a + j] = rng.random_range(0.5..1.0);
            }
        }
        return Ok(a);
    }
    Err(Error::Config(format!(
        "cannot draw {n_c} distinct classes with {k} of {n_a} active attributes"
    )))
}

/// Generates a dataset deterministically from `seed`.
pub fn synth_gzsl_dataset(cfg: &DataConfig, shape: RenderShape, seed: u64) -> Result<GzslDataset> {
    if cfg.n_seen == 0 || cfg.n_unseen == 0 {
        return Err(Error::Config(
            "need at least one seen and one unseen class".into(),
        ));
    }
    if cfg.train_per_class == 0 {
        return Err(Error::Config("train_per_class must be positive".into()));
    }
    if cfg.n_attr == 0 || cfg.active_attrs() > cfg.n_attr {
        return Err(Error::Config("bad attribute counts".into()));
    }
    let n_v = shape.grid_rows * shape.grid_cols;
    if n_v == 0 || shape.patch_dim == 0 || shape.attr_dim == 0 {
        return Err(Error::Config("render extents must be positive".into()));
    }
    if !(cfg.noise.is_finite() && cfg.noise >= 0.0) {
        return Err(Error::Config("noise must be finite and >= 0".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Tensor::randn(&[cfg.n_attr, shape.attr_dim], 1.0, &mut rng);
    let attributes = AttributeMatrix::unnamed(s)?.row_normalized();
    let class_attrs = class_attribute_vectors(cfg, &mut rng)?;

    let render_std = 1.0 / (cfg.active_attrs() as f64).sqrt();
    let renderers: Vec<Tensor> = (0..n_v)
        .map(|_| Tensor::randn(&[cfg.n_attr, shape.patch_dim], render_std, &mut rng))
        .collect();

    let render = |label: usize, rng: &mut ChaCha8Rng| -> Sample {
        let a = class_attrs.row(label);
        let noise = Tensor::randn(&[n_v, shape.patch_dim], 1.0, rng);
        let mut data = Vec::with_capacity(n_v * shape.patch_dim);
        for (p, r) in renderers.iter().enumerate() {
            for j in 0..shape.patch_dim {
                let clean: f64 = (0..cfg.n_attr).map(|i| a[i] * r.get(i, j)).sum();
                data.push(clean + cfg.noise * noise.get(p, j));
            }
        }
        Sample {
            label,
            patches: Tensor::new(&[n_v, shape.patch_dim], data).expect("extents checked"),
        }
    };

    let mut train = Vec::new();
    let mut test_seen = Vec::new();
    for c in 0..cfg.n_seen {
        for _ in 0..cfg.train_per_class {
            train.push(render(c, &mut rng));
        }
        for _ in 0..cfg.test_per_class {
            test_seen.push(render(c, &mut rng));
        }
    }
    let mut test_unseen = Vec::new();
    for c in cfg.n_seen..cfg.n_classes() {
        for _ in 0..cfg.test_per_class {
            test_unseen.push(render(c, &mut rng));
        }
    }
    Ok(GzslDataset {
        n_seen: cfg.n_seen,
        n_unseen: cfg.n_unseen,
        grid_rows: shape.grid_rows,
        grid_cols: shape.grid_cols,
        patch_dim: shape.patch_dim,
        attributes,
        class_attrs,
        train,
        test_seen,
        test_unseen,
    })
}
