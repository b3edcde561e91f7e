//! Row-balanced sparse matrices with relative (zero-gap) column indices.
//!
//! Every row stores exactly `k` entries. Each entry carries the number of
//! zeros skipped since the previous stored entry of the same row, so the
//! absolute column is recovered by a running sum:
//! `col[0] = rel[0]`, `col[j] = col[j-1] + rel[j] + 1`.

use crate::error::{Error, Result};
use crate::lstm::check_len;
use crate::numerics::{adder_tree_sum, FixedSpec};
use crate::tensor::{Mask, Matrix};

/// Default relative-index width in bits.
pub const DEFAULT_ADDR_BITS: u32 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct RowBalancedMatrix<T> {
    rows: usize,
    cols: usize,
    k: usize,
    values: Vec<T>,
    rel_idx: Vec<u32>,
}

fn max_rel(addr_bits: u32) -> usize {
    if addr_bits >= usize::BITS {
        usize::MAX
    } else {
        (1usize << addr_bits) - 1
    }
}

impl<T: Copy + Default + PartialEq> RowBalancedMatrix<T> {
    /// Encodes the nonzero pattern of `dense`; every row must hold the same
    /// number of nonzeros.
    pub fn encode(dense: &Matrix<T>, addr_bits: u32) -> Result<Self> {
        let zero = T::default();
        let mask = dense.map(|v| v != zero);
        Self::from_mask(dense, &mask, addr_bits)
    }

    /// Encodes the positions kept by `mask`. Kept positions whose value is
    /// zero are stored explicitly, so the row stays balanced.
    pub fn from_mask(dense: &Matrix<T>, mask: &Mask, addr_bits: u32) -> Result<Self> {
        check_len("mask rows", mask.rows(), dense.rows())?;
        check_len("mask cols", mask.cols(), dense.cols())?;
        let rows = dense.rows();
        let k = if rows == 0 { 0 } else { mask.row_count(0) };
        let limit = max_rel(addr_bits);
        let mut values = Vec::with_capacity(rows * k);
        let mut rel_idx = Vec::with_capacity(rows * k);
        for r in 0..rows {
            let found = mask.row_count(r);
            if found != k {
                return Err(Error::Unbalanced {
                    row: r,
                    expected: k,
                    found,
                });
            }
            let mut next_free = 0usize;
            for (c, &keep) in mask.row(r).iter().enumerate() {
                if !keep {
                    continue;
                }
                let gap = c - next_free;
                if gap > limit {
                    return Err(Error::RelativeIndexOverflow {
                        row: r,
                        value: gap,
                        bits: addr_bits,
                    });
                }
                values.push(dense.get(r, c));
                rel_idx.push(gap as u32);
                next_free = c + 1;
            }
        }
        Ok(Self {
            rows,
            cols: dense.cols(),
            k,
            values,
            rel_idx,
        })
    }

    pub fn decode(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row_columns(r).into_iter().zip(self.row_values(r)) {
                out.set(r, c, *v);
            }
        }
        out
    }
}

impl<T: Copy> RowBalancedMatrix<T> {
    /// Assembles a matrix from raw parts, validating the addressing.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        k: usize,
        values: Vec<T>,
        rel_idx: Vec<u32>,
    ) -> Result<Self> {
        check_len("sparse values", values.len(), rows * k)?;
        check_len("sparse indices", rel_idx.len(), rows * k)?;
        let m = Self {
            rows,
            cols,
            k,
            values,
            rel_idx,
        };
        for r in 0..rows {
            address_decode(m.row_rel(r), cols)?;
        }
        Ok(m)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Stored entries per row.
    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn row_values(&self, r: usize) -> &[T] {
        &self.values[r * self.k..(r + 1) * self.k]
    }

    #[inline]
    pub fn row_rel(&self, r: usize) -> &[u32] {
        &self.rel_idx[r * self.k..(r + 1) * self.k]
    }

    /// Absolute columns of row `r`. Construction guarantees they are valid.
    pub fn row_columns(&self, r: usize) -> Vec<usize> {
        address_decode(self.row_rel(r), self.cols).expect("validated at construction")
    }

    /// `(column, value)` pairs of row `r`, decoding the relative indices on
    /// the fly.
    #[inline]
    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let mut next = 0usize;
        self.row_rel(r).iter().zip(self.row_values(r)).map(move |(&rel, &v)| {
            let c = next + rel as usize;
            next = c + 1;
            (c, v)
        })
    }

    /// Kept-position mask.
    pub fn mask(&self) -> Mask {
        let mut m = Matrix::filled(self.rows, self.cols, false);
        for r in 0..self.rows {
            for c in self.row_columns(r) {
                m.set(r, c, true);
            }
        }
        m
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> RowBalancedMatrix<U> {
        RowBalancedMatrix {
            rows: self.rows,
            cols: self.cols,
            k: self.k,
            values: self.values.iter().copied().map(f).collect(),
            rel_idx: self.rel_idx.clone(),
        }
    }

    /// Largest relative index stored.
    pub fn max_rel(&self) -> u32 {
        self.rel_idx.iter().copied().max().unwrap_or(0)
    }
}

/// Running-sum decode of one row's relative indices into absolute columns.
pub fn address_decode(rel: &[u32], cols: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(rel.len());
    let mut next_free = 0usize;
    for &gap in rel {
        let col = next_free + gap as usize;
        if col >= cols {
            return Err(Error::CorruptImage(format!(
                "decoded column {col} outside {cols} columns"
            )));
        }
        out.push(col);
        next_free = col + 1;
    }
    Ok(out)
}

pub fn spmxv(s: &RowBalancedMatrix<f64>, v: &[f64]) -> Result<Vec<f64>> {
    check_len("spmxv operand", v.len(), s.cols())?;
    Ok((0..s.rows())
        .map(|r| {
            s.row_entries(r).fold(0.0, |acc, (c, w)| acc + w * v[c])
        })
        .collect())
}

/// Fixed-point SpMxV using the canonical adder-tree order.
pub fn spmxv_fixed(spec: FixedSpec, s: &RowBalancedMatrix<i32>, v: &[i32]) -> Result<Vec<i32>> {
    check_len("spmxv operand", v.len(), s.cols())?;
    let mut terms = Vec::with_capacity(s.k());
    Ok((0..s.rows())
        .map(|r| {
            terms.clear();
            terms.extend(s.row_entries(r).map(|(c, w)| spec.mul(w, v[c])));
            adder_tree_sum(spec, &terms)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lstm::{mxv, mxv_fixed};
    use proptest::prelude::*;
    use rand::{seq::index::sample, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row_matrix(row: &[f64]) -> Matrix<f64> {
        Matrix::from_rows(&[row.to_vec()]).unwrap()
    }

    #[test]
    fn encode_examples() {
        let s = RowBalancedMatrix::encode(&row_matrix(&[5.0, 0.0, 0.0, 7.0]), 8).unwrap();
        assert_eq!(s.row_values(0), &[5.0, 7.0]);
        assert_eq!(s.row_rel(0), &[0, 2]);

        let s = RowBalancedMatrix::encode(&row_matrix(&[0.0, 9.0, 4.0, 0.0]), 8).unwrap();
        assert_eq!(s.row_values(0), &[9.0, 4.0]);
        assert_eq!(s.row_rel(0), &[1, 0]);

        let s = RowBalancedMatrix::encode(&row_matrix(&[1.0, 2.0, 3.0]), 8).unwrap();
        assert_eq!(s.k(), 3);
        assert_eq!(s.row_rel(0), &[0, 0, 0]);
    }

    #[test]
    fn encode_rejects_unbalanced_rows() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.0, 3.0, 0.0]]).unwrap();
        assert!(matches!(
            RowBalancedMatrix::encode(&m, 8),
            Err(Error::Unbalanced { row: 1, expected: 2, found: 1 })
        ));
    }

    #[test]
    fn encode_rejects_gap_overflow() {
        let mut row = vec![0.0; 20];
        row[17] = 1.0;
        assert!(matches!(
            RowBalancedMatrix::encode(&row_matrix(&row), 4),
            Err(Error::RelativeIndexOverflow { value: 17, bits: 4, .. })
        ));
        assert!(RowBalancedMatrix::encode(&row_matrix(&row), 5).is_ok());
    }

    #[test]
    fn mask_keeps_explicit_zeros() {
        let m = Matrix::from_rows(&[vec![0.0, 2.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
        let mask = Matrix::from_rows(&[vec![true, true, false], vec![true, false, true]]).unwrap();
        let s = RowBalancedMatrix::from_mask(&m, &mask, 8).unwrap();
        assert_eq!(s.k(), 2);
        assert_eq!(s.row_values(0), &[0.0, 2.0]);
        assert_eq!(s.row_columns(1), vec![0, 2]);
        assert_eq!(s.mask(), mask);
    }

    #[test]
    fn address_decode_examples() {
        assert_eq!(address_decode(&[1, 2, 1], 10).unwrap(), vec![1, 4, 6]);
        assert_eq!(address_decode(&[0, 0, 0], 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(address_decode(&[], 3).unwrap(), Vec::<usize>::new());
        assert!(matches!(
            address_decode(&[1, 2, 1], 6),
            Err(Error::CorruptImage(_))
        ));
    }

    #[test]
    fn empty_rows() {
        let z = Matrix::<f64>::zeros(3, 4);
        let s = RowBalancedMatrix::encode(&z, 8).unwrap();
        assert_eq!(s.k(), 0);
        assert_eq!(s.decode(), z);
        assert_eq!(spmxv(&s, &[1.0; 4]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn from_parts_validates_columns() {
        assert!(RowBalancedMatrix::from_parts(1, 4, 2, vec![1, 2], vec![1, 1]).is_ok());
        assert!(RowBalancedMatrix::from_parts(1, 4, 2, vec![1, 2], vec![2, 1]).is_err());
        assert!(RowBalancedMatrix::from_parts(1, 4, 2, vec![1], vec![0, 0]).is_err());
    }

    pub(crate) fn random_balanced(
        rng: &mut ChaCha8Rng,
        rows: usize,
        cols: usize,
        k: usize,
    ) -> Matrix<f64> {
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in sample(rng, cols, k) {
                let mut v = 0.0;
                while v == 0.0 {
                    v = rng.gen_range(-1.0..1.0);
                }
                m.set(r, c, v);
            }
        }
        m
    }

    #[test]
    fn random_balanced_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = random_balanced(&mut rng, 8, 8, 3);
        let s = RowBalancedMatrix::encode(&w, 8).unwrap();
        assert_eq!(s.decode(), w);
        assert_eq!(RowBalancedMatrix::encode(&s.decode(), 8).unwrap(), s);
    }

    #[test]
    fn fixed_spmxv_matches_dense_mxv() {
        let spec = FixedSpec::Q4_12;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let (rows, cols) = (rng.gen_range(1..24), rng.gen_range(1..24));
            let k = rng.gen_range(0..=cols);
            // wide weights provoke saturation inside the tree
            let w = random_balanced(&mut rng, rows, cols, k).map(|v| spec.quantize(v * 6.0));
            let mask = random_balanced_mask(&w);
            let s = RowBalancedMatrix::from_mask(&w, &mask, 8).unwrap();
            let v: Vec<i32> = (0..cols).map(|_| rng.gen_range(-32768..32768)).collect();
            assert_eq!(spmxv_fixed(spec, &s, &v).unwrap(), mxv_fixed(spec, &s.decode(), &v).unwrap());
            assert_eq!(spmxv_fixed(spec, &s, &v).unwrap(), mxv_fixed(spec, &w, &v).unwrap());
        }
    }

    // positions that were nonzero before quantization may have rounded to 0
    fn random_balanced_mask(w: &Matrix<i32>) -> Mask {
        let k = (0..w.rows()).map(|r| w.row(r).iter().filter(|&&v| v != 0).count()).max().unwrap_or(0);
        let mut mask = w.map(|v| v != 0);
        for r in 0..w.rows() {
            let mut c = 0;
            while mask.row_count(r) < k {
                if !mask.get(r, c) {
                    mask.set(r, c, true);
                }
                c += 1;
            }
        }
        mask
    }

    proptest! {
        #[test]
        fn encode_decode_identities(seed in any::<u64>(), rows in 1usize..12, cols in 1usize..40, kf in 0.0f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = ((cols as f64) * kf).floor() as usize;
            let w = random_balanced(&mut rng, rows, cols, k);
            let s = RowBalancedMatrix::encode(&w, 8).unwrap();
            prop_assert_eq!(s.decode(), w.clone());
            prop_assert_eq!(RowBalancedMatrix::encode(&s.decode(), 8).unwrap(), s.clone());
            for r in 0..rows {
                let cols_r = s.row_columns(r);
                prop_assert!(cols_r.windows(2).all(|p| p[0] < p[1]));
                prop_assert!(cols_r.iter().all(|&c| c < cols));
            }
            let v: Vec<f64> = (0..cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
            prop_assert_eq!(spmxv(&s, &v).unwrap(), mxv(&w, &v).unwrap());
        }
    }
}
