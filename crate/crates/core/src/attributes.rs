//! Shared attribute word vectors and class prototypes.

use std::path::Path;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// One D-dim word vector per attribute name (`N_a × D`).
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeMatrix {
    pub names: Vec<String>,
    pub vectors: Tensor,
}

impl AttributeMatrix {
    pub fn new(names: Vec<String>, vectors: Tensor) -> Result<Self> {
        let (n, _) = vectors.rank2("AttributeMatrix")?;
        if names.len() != n {
            return Err(Error::shape(
                "AttributeMatrix names",
                &[names.len()],
                vectors.shape(),
            ));
        }
        let vectors = vectors.check_finite("AttributeMatrix")?;
        Ok(AttributeMatrix { names, vectors })
    }

    /// Matrix with generated names `attr0, attr1, ...`.
    pub fn unnamed(vectors: Tensor) -> Result<Self> {
        let names = (0..vectors.rows()).map(|i| format!("attr{i}")).collect();
        Self::new(names, vectors)
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    /// Scales every row to unit Euclidean norm; zero rows stay zero.
    pub fn row_normalized(&self) -> Self {
        let mut v = self.vectors.clone();
        let d = self.dim();
        for row in v.data_mut().chunks_mut(d) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        AttributeMatrix {
            names: self.names.clone(),
            vectors: v,
        }
    }
}

/// Parses attribute vectors: one `name v1 .. vD` line per attribute,
/// whitespace separated. Blank lines are skipped but still counted.
///
/// With `expected = Some((n_a, d))` both extents are enforced; otherwise
/// `d` is taken from the first line.
pub fn parse_attribute_vectors(
    text: &str,
    expected: Option<(usize, usize)>,
) -> Result<AttributeMatrix> {
    let mut names = Vec::new();
    let mut data = Vec::new();
    let mut dim = expected.map(|(_, d)| d);
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let mut fields = line.split_whitespace();
        let Some(name) = fields.next() else { continue };
        let values = fields
            .map(|tok| {
                tok.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        line: lineno,
                        msg: format!("not a finite number: {tok:?}"),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        let d = *dim.get_or_insert(values.len());
        if values.len() != d || d == 0 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {d} values after the name, found {}", values.len()),
            });
        }
        names.push(name.to_string());
        data.extend(values);
    }
    if names.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "no attribute vectors in input".into(),
        });
    }
    let d = dim.unwrap_or_default();
    if let Some((n_a, d_exp)) = expected {
        if names.len() != n_a {
            return Err(Error::shape(
                "load_attribute_vectors",
                &[n_a, d_exp],
                &[names.len(), d],
            ));
        }
    }
    let vectors = Tensor::new(&[names.len(), d], data)?;
    AttributeMatrix::new(names, vectors)
}

/// Reads an attribute-vector file; see [`parse_attribute_vectors`].
pub fn load_attribute_vectors(path: &Path, expected: (usize, usize)) -> Result<AttributeMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_attribute_vectors(&text, Some(expected))
}

/// Embedded prototypes `A · W_d` (`N_c × D`) as plain values.
pub fn embed_prototypes(class_attrs: &Tensor, w_d: &Tensor) -> Result<Tensor> {
    tensor::matmul(class_attrs, w_d)
}

/// Embedded prototypes on a graph, differentiable w.r.t. `w_d`.
pub fn embed_prototypes_var(g: &mut Graph, class_attrs: Var, w_d: Var) -> Result<Var> {
    g.matmul(class_attrs, w_d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reads_back_values() {
        let m = parse_attribute_vectors("red 1 2 3\nwing -0.5 0 1e-3\n", Some((2, 3))).unwrap();
        assert_eq!(m.names, ["red", "wing"]);
        assert_eq!(m.vectors.data(), &[1.0, 2.0, 3.0, -0.5, 0.0, 1e-3]);
    }

    #[test]
    fn empty_input_is_a_parse_error() {
        assert!(matches!(
            parse_attribute_vectors("", None),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            parse_attribute_vectors("\n   \n", Some((1, 2))),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn bad_token_names_its_line() {
        let text = "a 1 2\nb 1 2\nc 1 2\nd 1 2\ne 1 x\n";
        let err = parse_attribute_vectors(text, Some((5, 2))).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 5, .. }), "{err}");
        assert!(err.to_string().contains("line 5"));
    }

    #[test]
    fn wrong_column_count_names_its_line() {
        let err = parse_attribute_vectors("a 1 2\nb 1 2 3\n", None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn attribute_count_mismatch_is_a_shape_error() {
        let err = parse_attribute_vectors("a 1 2\nb 1 2\n", Some((3, 2))).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "{err}");
    }

    #[test]
    fn load_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attrs.txt");
        std::fs::write(&path, "x 0.5 0.25\n").unwrap();
        let m = load_attribute_vectors(&path, (1, 2)).unwrap();
        assert_eq!(m.vectors.shape(), &[1, 2]);
        assert!(matches!(
            load_attribute_vectors(&dir.path().join("missing"), (1, 2)),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn row_normalization() {
        let m = AttributeMatrix::unnamed(Tensor::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]))
            .unwrap()
            .row_normalized();
        assert_eq!(m.vectors.data(), &[0.6, 0.8, 0.0, 0.0]);
    }

    #[test]
    fn identity_selection_returns_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::randn(&[4, 6], 1.0, &mut rng);
        assert_eq!(embed_prototypes(&Tensor::identity(4), &w).unwrap(), w);
        let onehot = Tensor::row_vector(&[0.0, 0.0, 1.0, 0.0]);
        let p = embed_prototypes(&onehot, &w).unwrap();
        assert_eq!(p.data(), w.row(2));
    }

    #[test]
    fn dense_embedding_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[6, 8], 1.0, &mut rng);
        let p = embed_prototypes(&a, &w).unwrap();
        for i in 0..4 {
            for j in 0..8 {
                let mut s = 0.0;
                for k in 0..6 {
                    s += a.get(i, k) * w.get(k, j);
                }
                assert!((p.get(i, j) - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let err = embed_prototypes(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 5])).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    proptest::proptest! {
        #[test]
        fn embedding_is_linear(seed in 0u64..1000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a1 = Tensor::randn(&[3, 5], 1.0, &mut rng);
            let a2 = Tensor::randn(&[3, 5], 1.0, &mut rng);
            let w = Tensor::randn(&[5, 4], 1.0, &mut rng);
            let mix = a1.zip_map(&a2, |x, y| alpha * x + beta * y);
            let lhs = embed_prototypes(&mix, &w).unwrap();
            let e1 = embed_prototypes(&a1, &w).unwrap();
            let e2 = embed_prototypes(&a2, &w).unwrap();
            let rhs = e1.zip_map(&e2, |x, y| alpha * x + beta * y);
            proptest::prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-10);
        }
    }
}
