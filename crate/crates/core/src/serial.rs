//! JSON conventions shared by every serialized artifact.
//!
//! Complex scalars are `[re, im]` pairs. A matrix is an object
//! `{"rows": r, "cols": c, "data": [[re, im], ...]}` with `data` in
//! column-major order (the order of `vec{.}`).

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::linalg::{c64, CMatrix, CVector};

#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: Vec<[f64; 2]>,
}

impl From<&CMatrix> for MatrixRepr {
    fn from(m: &CMatrix) -> Self {
        MatrixRepr {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.iter().map(|z| [z.re, z.im]).collect(),
        }
    }
}

impl MatrixRepr {
    fn into_matrix<E: serde::de::Error>(self) -> Result<CMatrix, E> {
        if self.data.len() != self.rows * self.cols {
            return Err(E::custom(format!(
                "matrix data has {} entries, expected {}x{}",
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        if self.data.iter().flatten().any(|x| !x.is_finite()) {
            return Err(E::custom("matrix contains non-finite entries"));
        }
        Ok(CMatrix::from_iterator(
            self.rows,
            self.cols,
            self.data.into_iter().map(|[re, im]| c64::new(re, im)),
        ))
    }
}

pub mod matrix {
    use super::*;

    pub fn serialize<S: Serializer>(m: &CMatrix, s: S) -> Result<S::Ok, S::Error> {
        MatrixRepr::from(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<CMatrix, D::Error> {
        MatrixRepr::deserialize(d)?.into_matrix()
    }
}

pub mod matrix_vec {
    use super::*;

    pub fn serialize<S: Serializer>(ms: &[CMatrix], s: S) -> Result<S::Ok, S::Error> {
        let reprs: Vec<MatrixRepr> = ms.iter().map(MatrixRepr::from).collect();
        reprs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<CMatrix>, D::Error> {
        Vec::<MatrixRepr>::deserialize(d)?
            .into_iter()
            .map(MatrixRepr::into_matrix)
            .collect()
    }
}

pub mod matrix_grid {
    use super::*;

    pub fn serialize<S: Serializer>(ms: &[Vec<CMatrix>], s: S) -> Result<S::Ok, S::Error> {
        let reprs: Vec<Vec<MatrixRepr>> = ms
            .iter()
            .map(|row| row.iter().map(MatrixRepr::from).collect())
            .collect();
        reprs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<CMatrix>>, D::Error> {
        Vec::<Vec<MatrixRepr>>::deserialize(d)?
            .into_iter()
            .map(|row| row.into_iter().map(MatrixRepr::into_matrix).collect())
            .collect()
    }
}

pub mod vector_vec {
    use super::*;

    pub fn serialize<S: Serializer>(vs: &[CVector], s: S) -> Result<S::Ok, S::Error> {
        let reprs: Vec<Vec<[f64; 2]>> = vs
            .iter()
            .map(|v| v.iter().map(|z| [z.re, z.im]).collect())
            .collect();
        reprs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<CVector>, D::Error> {
        let reprs = Vec::<Vec<[f64; 2]>>::deserialize(d)?;
        reprs
            .into_iter()
            .map(|v| {
                if v.iter().flatten().any(|x| !x.is_finite()) {
                    return Err(D::Error::custom("vector contains non-finite entries"));
                }
                Ok(CVector::from_iterator(
                    v.len(),
                    v.into_iter().map(|[re, im]| c64::new(re, im)),
                ))
            })
            .collect()
    }
}
