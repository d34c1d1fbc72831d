//! Orthonormal fast Walsh-Hadamard transform.
//!
//! The transform computes `H_d v / sqrt(d)` for the Sylvester Hadamard
//! matrix `H_d`. With that normalization it is orthonormal and symmetric,
//! hence its own inverse; rotating both queries and keys leaves every
//! query-key inner product unchanged.

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tensor3};

/// A power-of-two transform length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HadamardSize(usize);

impl HadamardSize {
    pub fn new(d: usize) -> Result<Self> {
        if d == 0 || !d.is_power_of_two() {
            return Err(Error::NotPowerOfTwo(d));
        }
        Ok(Self(d))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

/// In-place butterfly FHT with `1/sqrt(d)` normalization.
pub fn fht_inplace(v: &mut [f64]) -> Result<()> {
    let d = HadamardSize::new(v.len())?.get();
    let mut half = 1;
    while half < d {
        for block in (0..d).step_by(2 * half) {
            for i in block..block + half {
                let a = v[i];
                let b = v[i + half];
                v[i] = a + b;
                v[i + half] = a - b;
            }
        }
        half *= 2;
    }
    let norm = 1.0 / (d as f64).sqrt();
    v.iter_mut().for_each(|x| *x *= norm);
    Ok(())
}

/// Returns the transformed copy of `v`.
pub fn fht(v: &[f64]) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    fht_inplace(&mut out)?;
    Ok(out)
}

/// Applies [`fht_inplace`] to every `(token, head)` vector.
pub fn fht_tensor(x: &Tensor3) -> Result<Tensor3> {
    HadamardSize::new(x.head_dim())?;
    let mut out = x.clone();
    for t in 0..out.tokens() {
        for h in 0..out.heads() {
            fht_inplace(out.vector_mut(t, h))?;
        }
    }
    Ok(out)
}

/// Dense `H_d / sqrt(d)`. Used for offline weight folding and as a test oracle.
pub fn hadamard_matrix(size: HadamardSize) -> Matrix {
    let d = size.get();
    let norm = 1.0 / (d as f64).sqrt();
    // Sylvester entry: (-1)^{popcount(i & j)}
    Matrix::from_fn(d, d, |i, j| {
        if (i & j).count_ones() % 2 == 0 {
            norm
        } else {
            -norm
        }
    })
}
