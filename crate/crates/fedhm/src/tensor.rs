//! Dense n-dimensional tensor with contiguous row-major storage.
//!
//! This is the universal value of the NN core: inputs, weights, factor
//! matrices, gradients, and running statistics are all `Tensor`s. Values are
//! `f64`; every constructor rejects non-finite data so NaN/Inf cannot
//! propagate silently.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` matches `shape` and is finite.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dimension(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Reinterprets the buffer under a new shape of equal volume.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dimension(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.into()))
        }
    }

    /// Row-major offset of a 2D index.
    #[inline]
    pub fn idx2(&self, i: usize, j: usize) -> usize {
        i * self.shape[1] + j
    }

    /// Row-major offset of a 4D index.
    #[inline]
    pub fn idx4(&self, a: usize, b: usize, c: usize, d: usize) -> usize {
        ((a * self.shape[1] + b) * self.shape[2] + c) * self.shape[3] + d
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[self.idx2(i, j)]
    }

    #[inline]
    pub fn at4(&self, a: usize, b: usize, c: usize, d: usize) -> f64 {
        self.data[self.idx4(a, b, c, d)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// `self += s * other`; shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor, s: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dimension(format!(
                "add_scaled {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dimension(format!(
                "sub {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn frob_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frob_norm(&self) -> f64 {
        self.frob_norm_sq().sqrt()
    }

    /// Largest absolute entry-wise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `C = A · B` for 2D tensors, A (m,k), B (k,n).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = dims2(a, "matmul lhs")?;
    let (kb, n) = dims2(b, "matmul rhs")?;
    if ka != kb {
        return Err(Error::dimension(format!(
            "matmul inner dims {} vs {}",
            ka, kb
        )));
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * ka..(i + 1) * ka];
        let orow = &mut out[i * n..(i + 1) * n];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &bd[k * n..(k + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// `C = A · Bᵀ` for 2D tensors, A (m,k), B (n,k).
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = dims2(a, "matmul_nt lhs")?;
    let (n, kb) = dims2(b, "matmul_nt rhs")?;
    if ka != kb {
        return Err(Error::dimension(format!(
            "matmul_nt inner dims {} vs {}",
            ka, kb
        )));
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * ka..(i + 1) * ka];
        for j in 0..n {
            let brow = &bd[j * kb..(j + 1) * kb];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(&[m, n], out)
}

/// `C = Aᵀ · B` for 2D tensors, A (k,m), B (k,n).
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ka, m) = dims2(a, "matmul_tn lhs")?;
    let (kb, n) = dims2(b, "matmul_tn rhs")?;
    if ka != kb {
        return Err(Error::dimension(format!(
            "matmul_tn inner dims {} vs {}",
            ka, kb
        )));
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for k in 0..ka {
        let arow = &ad[k * m..(k + 1) * m];
        let brow = &bd[k * n..(k + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return Err(Error::dimension(format!(
            "{what} must be 2D, got {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(Tensor::new(&[2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(&[2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        // brute-force oracle with explicit loops, independent of the impl path
        let mut rng = 0x2545f4914f6cdd1du64;
        let mut next = move || {
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            (rng >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let a = Tensor::from_fn(&[4, 3], |_| next());
        let b = Tensor::from_fn(&[3, 5], |_| next());
        let c = matmul(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += a.at2(i, k) * b.at2(k, j);
                }
                assert!((c.at2(i, j) - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn transposed_variants_agree_with_plain() {
        let a = Tensor::from_fn(&[3, 4], |i| (i as f64) * 0.37 - 1.0);
        let b = Tensor::from_fn(&[5, 4], |i| (i as f64) * -0.11 + 0.3);
        let nt = matmul_nt(&a, &b).unwrap();
        // compare against matmul with explicit transpose
        let bt = Tensor::from_fn(&[4, 5], |i| {
            let r = i / 5;
            let c = i % 5;
            b.at2(c, r)
        });
        let plain = matmul(&a, &bt).unwrap();
        assert!(nt.max_abs_diff(&plain) <= 1e-13);

        let c = Tensor::from_fn(&[4, 3], |i| (i as f64) * 0.05 - 0.2);
        let d = Tensor::from_fn(&[4, 6], |i| (i as f64) * 0.021 + 0.1);
        let tn = matmul_tn(&c, &d).unwrap();
        let ct = Tensor::from_fn(&[3, 4], |i| {
            let r = i / 4;
            let cc = i % 4;
            c.at2(cc, r)
        });
        let plain = matmul(&ct, &d).unwrap();
        assert!(tn.max_abs_diff(&plain) <= 1e-13);
    }

    #[test]
    fn reshape_preserves_volume() {
        let t = Tensor::from_fn(&[2, 6], |i| i as f64);
        let r = t.reshape(&[3, 4]).unwrap();
        assert_eq!(r.shape(), &[3, 4]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(&[5, 2]).is_err());
    }
}
