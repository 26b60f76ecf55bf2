//! Dense 64-bit tensors, row-major, plus the raw kernels the autodiff tape
//! records. Everything downstream (attention, GAT aggregation, the losses)
//! is built from these.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Dense multi-dimensional array of `f64`, row-major.
///
/// Most operations interpret tensors as matrices: a 1-D tensor of length `n`
/// acts as a single row `(1, n)` where a matrix is required.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and positive");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| normal.sample(rng)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Row count under the matrix view.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Column count (last extent) under the matrix view.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Max |a - b| over all entries; errors on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "max_abs_diff shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `out += alpha * a`; shapes must agree.
pub fn axpy(alpha: f64, a: &Tensor, out: &mut Tensor) {
    debug_assert_eq!(a.shape(), out.shape());
    for (o, x) in out.data.iter_mut().zip(&a.data) {
        *o += alpha * x;
    }
}

/// C = op(A) · op(B) where `ta`/`tb` transpose the 2-D matrix views.
///
/// A is (m×k) after `ta`, B is (k×n) after `tb`; returns (m×n).
pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    if k != kb {
        return Err(Error::Shape(format!(
            "matmul inner extents {k} vs {kb} (a {:?} ta={ta}, b {:?} tb={tb})",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    matmul_into(a, b, ta, tb, m, k, n, out.data_mut());
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn matmul_into(a: &Tensor, b: &Tensor, ta: bool, tb: bool, m: usize, k: usize, n: usize, out: &mut [f64]) {
    let ad = a.data();
    let bd = b.data();
    match (ta, tb) {
        (false, false) => {
            // (i,k,j) loop order keeps B row-major friendly
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = ad[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bd[p * n..(p + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &ad[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    let brow = &bd[j * k..(j + 1) * k];
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += arow[p] * brow[p];
                    }
                    orow[j] += acc;
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let arow = &ad[p * m..(p + 1) * m];
                let brow = &bd[p * n..(p + 1) * n];
                for i in 0..m {
                    let av = arow[i];
                    if av == 0.0 {
                        continue;
                    }
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = ad[p * m + i];
                    if av == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        orow[j] += av * bd[j * k + p];
                    }
                }
            }
        }
    }
}

/// Block-diagonal matmul: A and B are stacks of `batch` equally sized blocks.
pub fn batch_matmul(a: &Tensor, b: &Tensor, batch: usize, ta: bool, tb: bool) -> Result<Tensor> {
    if a.rows() % batch != 0 || b.rows() % batch != 0 {
        return Err(Error::Shape(format!(
            "batch_matmul: row counts {} / {} not divisible by batch {batch}",
            a.rows(),
            b.rows()
        )));
    }
    let (ar, ac) = (a.rows() / batch, a.cols());
    let (br, bc) = (b.rows() / batch, b.cols());
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    if k != kb {
        return Err(Error::Shape(format!(
            "batch_matmul inner extents {k} vs {kb}"
        )));
    }
    let mut out = Tensor::zeros(&[batch * m, n]);
    for blk in 0..batch {
        let asub = Tensor {
            shape: vec![ar, ac],
            data: a.data()[blk * ar * ac..(blk + 1) * ar * ac].to_vec(),
        };
        let bsub = Tensor {
            shape: vec![br, bc],
            data: b.data()[blk * br * bc..(blk + 1) * br * bc].to_vec(),
        };
        matmul_into(
            &asub,
            &bsub,
            ta,
            tb,
            m,
            k,
            n,
            &mut out.data_mut()[blk * m * n..(blk + 1) * m * n],
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_extent_product() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_matches_hand_computed_product() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = matmul(&a, &b, false, false).unwrap();
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let mut rng = rand::rngs::mock::StepRng::new(1, 7);
        let vals: Vec<f64> = (0..12).map(|_| (rng.gen::<u32>() % 100) as f64 / 10.0).collect();
        let a = Tensor::new(vec![3, 4], vals.clone()).unwrap();
        let at = {
            let mut d = vec![0.0; 12];
            for i in 0..3 {
                for j in 0..4 {
                    d[j * 3 + i] = vals[i * 4 + j];
                }
            }
            Tensor::new(vec![4, 3], d).unwrap()
        };
        let b = Tensor::new(vec![4, 2], (0..8).map(|x| x as f64).collect()).unwrap();
        let r1 = matmul(&at, &b, true, false).unwrap();
        let r2 = matmul(&a, &b, false, false).unwrap();
        assert_eq!(r1.data(), r2.data());

        let c = Tensor::new(vec![2, 4], (0..8).map(|x| x as f64 * 0.5).collect()).unwrap();
        let r3 = matmul(&a, &c, false, true).unwrap();
        let ct = {
            let mut d = vec![0.0; 8];
            for i in 0..2 {
                for j in 0..4 {
                    d[j * 2 + i] = c.data()[i * 4 + j];
                }
            }
            Tensor::new(vec![4, 2], d).unwrap()
        };
        let r4 = matmul(&a, &ct, false, false).unwrap();
        assert_eq!(r3.data(), r4.data());
    }

    #[test]
    fn batch_matmul_equals_per_block_matmul() {
        let a = Tensor::new(vec![4, 2], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let b = Tensor::new(vec![4, 3], (0..12).map(|x| x as f64).collect()).unwrap();
        let out = batch_matmul(&a, &b, 2, false, false).unwrap();
        for blk in 0..2 {
            let asub = Tensor::new(vec![2, 2], a.data()[blk * 4..blk * 4 + 4].to_vec()).unwrap();
            let bsub = Tensor::new(vec![2, 3], b.data()[blk * 6..blk * 6 + 6].to_vec()).unwrap();
            let expect = matmul(&asub, &bsub, false, false).unwrap();
            assert_eq!(&out.data()[blk * 6..blk * 6 + 6], expect.data());
        }
    }
}
