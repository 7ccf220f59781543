//! Checkpoint files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! b"VSPC"  u16 version
//! u32 len + UTF-8           config echo (key = value lines)
//! u64 n_attr, u64 n_seen    model extents not implied by the config
//! u64 epoch, u64 adam_step
//! u32 n_tensors
//! n_tensors × { u32 len + name, u32 rank, u64 × rank extents, f64 × numel }
//! 2 × n_tensors × { u32 rank, u64 × rank extents, f64 × numel }   Adam m then v
//! ```
//!
//! Tensors appear in parameter-layout order and are checked by name and
//! shape against the layout the config implies.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::{Reader, Writer};
use crate::config::RunConfig;
use crate::data::GzslDataset;
use crate::error::{Error, Result};
use crate::model::Vspcn;
use crate::params::ParamLayout;
use crate::tensor::Tensor;
use crate::train::AdamState;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"VSPC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Vspcn,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: u64,
}

impl Checkpoint {
    /// Untrained model for `cfg` sized to `data`, initialised from `cfg.seed`.
    pub fn initial(cfg: &RunConfig, data: &GzslDataset) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = Vspcn::init(cfg, data.n_attr(), data.n_seen, &mut rng)?;
        model.check_dataset(data)?;
        let adam = AdamState::new(&model.params);
        Ok(Checkpoint {
            model,
            adam,
            epoch: 0,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::header(&CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        w.str(&self.model.config.to_text());
        let params = &self.model.params;
        let ids = params.ids();
        let w_d = params.get(ids.w_d).shape()[0];
        let w_c = params.get(ids.w_c).shape()[1];
        w.usize(w_d);
        w.usize(w_c);
        w.u64(self.epoch);
        w.u64(self.adam.step);
        w.u32(params.tensors.len() as u32);
        for (spec, t) in params.layout.specs.iter().zip(&params.tensors) {
            w.str(&spec.name);
            w.tensor(t);
        }
        for t in self.adam.m.iter().chain(&self.adam.v) {
            w.tensor(t);
        }
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.header(&CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let text = r.str("config")?;
        let config = RunConfig::parse(&text)?;
        config.validate()?;
        let n_attr = r.extent("n_attr")?;
        let n_seen = r.extent("n_seen")?;
        if n_attr == 0 || n_seen == 0 {
            return Err(Error::Malformed("zero n_attr or n_seen".into()));
        }
        let epoch = r.u64("epoch")?;
        let step = r.u64("adam step")?;
        let layout = ParamLayout::new(&config.model, n_attr, n_seen);
        let n = r.u32("tensor count")? as usize;
        if n != layout.len() {
            return Err(Error::Malformed(format!(
                "{n} tensors stored, config implies {}",
                layout.len()
            )));
        }
        let mut tensors = Vec::with_capacity(n);
        for spec in &layout.specs {
            let name = r.str("tensor name")?;
            if name != spec.name {
                return Err(Error::Malformed(format!(
                    "expected tensor `{}`, found `{name}`",
                    spec.name
                )));
            }
            tensors.push(read_checked(&mut r, &spec.name, &spec.shape)?);
        }
        let mut moments = |which: &str| -> Result<Vec<Tensor>> {
            layout
                .specs
                .iter()
                .map(|spec| read_checked(&mut r, &format!("{which}.{}", spec.name), &spec.shape))
                .collect()
        };
        let m = moments("adam.m")?;
        let v = moments("adam.v")?;
        r.finish()?;
        let params = crate::params::ModelParams { layout, tensors };
        Ok(Checkpoint {
            model: Vspcn { config, params },
            adam: AdamState { step, m, v },
            epoch,
        })
    }

    /// Checks the stored tensors against what `cfg` would build for `data`.
    pub fn check_against(&self, cfg: &RunConfig, data: &GzslDataset) -> Result<()> {
        let layout = ParamLayout::new(&cfg.model, data.n_attr(), data.n_seen);
        let stored = &self.model.params;
        for spec in &layout.specs {
            match stored.by_name(&spec.name) {
                Some(t) if t.shape() == spec.shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::TensorShape {
                        name: spec.name.clone(),
                        expected: spec.shape.clone(),
                        found: t.shape().to_vec(),
                    })
                }
                None => return Err(Error::Malformed(format!("missing tensor `{}`", spec.name))),
            }
        }
        if layout.len() != stored.layout.len() {
            return Err(Error::Malformed(format!(
                "checkpoint has {} tensors, config implies {}",
                stored.layout.len(),
                layout.len()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn read_checked(r: &mut Reader<'_>, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = r.tensor(name)?;
    if t.shape() != shape {
        return Err(Error::TensorShape {
            name: name.to_owned(),
            expected: shape.to_vec(),
            found: t.shape().to_vec(),
        });
    }
    if !t.all_finite() {
        return Err(Error::Malformed(format!(
            "tensor `{name}` has non-finite values"
        )));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DataConfig, ModelConfig};
    use crate::data::{synth_gzsl_dataset, RenderShape};
    use crate::train::train;

    fn trained() -> (RunConfig, GzslDataset, Checkpoint) {
        let mut cfg = RunConfig {
            model: ModelConfig {
                d_model: 8,
                heads: 2,
                depth: 2,
                layer_split: 1,
                grid_rows: 2,
                grid_cols: 2,
                patch_dim: 4,
                ..ModelConfig::default()
            },
            data: DataConfig {
                n_seen: 3,
                n_unseen: 2,
                n_attr: 5,
                train_per_class: 2,
                test_per_class: 1,
                ..DataConfig::default()
            },
            ..RunConfig::default()
        };
        cfg.optim.epochs = 1;
        let shape = RenderShape {
            attr_dim: 8,
            grid_rows: 2,
            grid_cols: 2,
            patch_dim: 4,
        };
        let data = synth_gzsl_dataset(&cfg.data, shape, 0).unwrap();
        let ckpt = train(&cfg, &data).unwrap().checkpoint;
        (cfg, data, ckpt)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (_, _, ckpt) = trained();
        let bytes = ckpt.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        for (a, b) in ckpt
            .model
            .params
            .tensors
            .iter()
            .zip(&back.model.params.tensors)
        {
            let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(back, ckpt);
        assert_eq!(back.adam.step, 1);
    }

    #[test]
    fn every_truncation_is_an_error() {
        let (_, _, ckpt) = trained();
        let bytes = ckpt.encode();
        for cut in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
            let err = Checkpoint::decode(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(
                    err,
                    Error::Truncated { .. } | Error::BadMagic { .. } | Error::Parse { .. }
                ),
                "cut {cut}: {err}"
            );
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            Checkpoint::decode(&long),
            Err(Error::Malformed(_))
        ));
    }

    #[test]
    fn magic_and_version_are_checked() {
        let (_, _, ckpt) = trained();
        let mut bytes = ckpt.encode();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::decode(&bytes),
            Err(Error::BadMagic { .. })
        ));
        let mut bytes = ckpt.encode();
        bytes[4] = 9;
        assert!(matches!(
            Checkpoint::decode(&bytes),
            Err(Error::Version {
                expected: 1,
                found: 9
            })
        ));
    }

    #[test]
    fn mismatched_width_names_the_tensor() {
        let (mut cfg, data, ckpt) = trained();
        cfg.model.d_model = 12;
        match ckpt.check_against(&cfg, &data) {
            Err(Error::TensorShape { name, .. }) => assert_eq!(name, "cls"),
            other => panic!("unexpected {other:?}"),
        }

        // Stored tensor disagreeing with its own config echo.
        let mut bad = ckpt.clone();
        let id = bad.model.params.ids().pos;
        bad.model.params.tensors[id] = Tensor::zeros(&[4, 5]);
        match Checkpoint::decode(&bad.encode()) {
            Err(Error::TensorShape { name, .. }) => assert_eq!(name, "patch.pos"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn file_round_trip() {
        let (_, _, ckpt) = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vspc");
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
        assert!(matches!(
            Checkpoint::load(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }
}
