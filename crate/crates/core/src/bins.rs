//! Gaussian-blurred bin encoding of scalar prosodic contours. A scalar value
//! is soft-assigned over a uniform grid of bin centers; the soft assignment
//! both serves as a classification target and, through a learnable embedding
//! table, as a dense network input. Decoding back to a scalar is the
//! weight-normalized mean of the centers.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array2, ArrayView2};

/// Uniform grid of bin centers `c_i = i * width + minimum`, i = 1..=count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinGrid<F: Scalar> {
    pub minimum: F,
    pub width: F,
    pub count: usize,
    pub sigma: F,
}

impl<F: Scalar> BinGrid<F> {
    pub fn new(minimum: F, width: F, count: usize, sigma: F) -> Result<Self> {
        if count < 2 {
            return Err(Error::Config("bin count must be >= 2".into()));
        }
        if width <= F::zero() || sigma <= F::zero() {
            return Err(Error::Config("bin width and sigma must be positive".into()));
        }
        Ok(BinGrid {
            minimum,
            width,
            count,
            sigma,
        })
    }

    /// Center of the 1-indexed bin `i`.
    pub fn center(&self, i: usize) -> F {
        debug_assert!(i >= 1 && i <= self.count);
        F::cast_usize(i) * self.width + self.minimum
    }

    pub fn first_center(&self) -> F {
        self.center(1)
    }

    pub fn last_center(&self) -> F {
        self.center(self.count)
    }

    /// Clamp a value to the span of the centers. Used for energy, which is
    /// unbounded above but must land inside the finite grid.
    pub fn clamp(&self, v: F) -> F {
        v.max(self.first_center()).min(self.last_center())
    }
}

/// Per-frame soft assignment over the bins, entries in (0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct BinWeights<F: Scalar> {
    pub weights: Array2<F>,
}

impl<F: Scalar> BinWeights<F> {
    pub fn n_frames(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.weights.ncols()
    }
}

/// Total row weight below this is treated as a degenerate assignment; a
/// value that far from every center is a data bug worth surfacing.
pub const DEGENERATE_ROW_THRESHOLD: f64 = 1e-12;

/// Gaussian blur of each value over the grid:
/// `w[j][i] = exp(-(v_j - c_i)^2 / (2 sigma^2))`, unnormalized.
pub fn gaussian_bin_weights<F: Scalar>(values: &[F], grid: &BinGrid<F>) -> Result<BinWeights<F>> {
    let two_sigma_sq = F::cast(2.0) * grid.sigma * grid.sigma;
    let mut weights = Array2::zeros((values.len(), grid.count));
    for (j, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Shape(format!("non-finite value at frame {j}")));
        }
        for i in 0..grid.count {
            let d = v - grid.center(i + 1);
            weights[[j, i]] = (-(d * d) / two_sigma_sq).exp();
        }
    }
    Ok(BinWeights { weights })
}

/// Row-normalize weights so each row sums to one. Errors on degenerate rows.
pub fn normalize_rows<F: Scalar>(weights: &ArrayView2<F>) -> Result<Array2<F>> {
    let mut out = weights.to_owned();
    for (j, mut row) in out.rows_mut().into_iter().enumerate() {
        let total: F = row.iter().copied().sum();
        if total.f64() < DEGENERATE_ROW_THRESHOLD {
            return Err(Error::DegenerateBinRow {
                frame: j,
                total: total.f64(),
            });
        }
        row.mapv_inplace(|w| w / total);
    }
    Ok(out)
}

/// Weight-normalized sum of embeddings:
/// `o(b, E)[j] = sum_i b_i e_i / sum_i b_i`, shape `frames x d_e`.
pub fn encode_with_embeddings<F: Scalar>(
    bw: &BinWeights<F>,
    table: &ArrayView2<F>,
) -> Result<Array2<F>> {
    if bw.n_bins() != table.nrows() {
        return Err(Error::Shape(format!(
            "bin count {} != table rows {}",
            bw.n_bins(),
            table.nrows()
        )));
    }
    let normalized = normalize_rows(&bw.weights.view())?;
    Ok(normalized.dot(table))
}

/// Replace encoded frames where voicing is 0 with the unvoiced embedding.
pub fn apply_voicing<F: Scalar>(
    encoded: &Array2<F>,
    voicing: &[u8],
    unvoiced: &[F],
) -> Result<Array2<F>> {
    if encoded.nrows() != voicing.len() {
        return Err(Error::Shape(format!(
            "encoded frames {} != voicing length {}",
            encoded.nrows(),
            voicing.len()
        )));
    }
    if encoded.ncols() != unvoiced.len() {
        return Err(Error::Shape(format!(
            "embedding dim {} != unvoiced vector dim {}",
            encoded.ncols(),
            unvoiced.len()
        )));
    }
    let mut out = encoded.clone();
    for (j, &v) in voicing.iter().enumerate() {
        if v == 0 {
            for (d, &u) in unvoiced.iter().enumerate() {
                out[[j, d]] = u;
            }
        }
    }
    Ok(out)
}

/// Weighted mean of the bin centers per frame.
pub fn decode_scalar<F: Scalar>(bw: &BinWeights<F>, grid: &BinGrid<F>) -> Result<Vec<F>> {
    if bw.n_bins() != grid.count {
        return Err(Error::Shape(format!(
            "bin count {} != grid count {}",
            bw.n_bins(),
            grid.count
        )));
    }
    let mut out = Vec::with_capacity(bw.n_frames());
    for (j, row) in bw.weights.rows().into_iter().enumerate() {
        let total: F = row.iter().copied().sum();
        if total.f64() < DEGENERATE_ROW_THRESHOLD {
            return Err(Error::DegenerateBinRow {
                frame: j,
                total: total.f64(),
            });
        }
        let weighted: F = row
            .iter()
            .enumerate()
            .map(|(i, &w)| w * grid.center(i + 1))
            .sum();
        out.push(weighted / total);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn pitch_grid() -> BinGrid<f64> {
        BinGrid::new(-250.0, 2.5, 200, 4.0).unwrap()
    }

    #[test]
    fn grid_endpoints_from_constants() {
        let g = pitch_grid();
        assert_eq!(g.first_center(), -247.5);
        assert_eq!(g.last_center(), 250.0);
    }

    #[test]
    fn weight_is_one_at_center_and_exp_half_at_sigma() {
        let g = pitch_grid();
        let c10 = g.center(10);
        let bw = gaussian_bin_weights(&[c10], &g).unwrap();
        assert_eq!(bw.weights[[0, 9]], 1.0);

        let bw = gaussian_bin_weights(&[c10 + g.sigma], &g).unwrap();
        let expect = (-0.5f64).exp();
        assert!((bw.weights[[0, 9]] - expect).abs() < 1e-12);
        assert!((expect - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn weights_are_symmetric_around_a_center() {
        let g = pitch_grid();
        let c = g.center(100);
        let d = 3.3;
        let lo = gaussian_bin_weights(&[c - d], &g).unwrap();
        let hi = gaussian_bin_weights(&[c + d], &g).unwrap();
        assert!((lo.weights[[0, 99]] - hi.weights[[0, 99]]).abs() < 1e-12);
    }

    #[test]
    fn translation_consistency() {
        let g1 = BinGrid::<f64>::new(-10.0, 0.5, 40, 1.0).unwrap();
        let delta = 123.25;
        let g2 = BinGrid::new(-10.0 + delta, 0.5, 40, 1.0).unwrap();
        let a = gaussian_bin_weights(&[1.75], &g1).unwrap();
        let b = gaussian_bin_weights(&[1.75 + delta], &g2).unwrap();
        for i in 0..40 {
            assert!((a.weights[[0, i]] - b.weights[[0, i]]).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_value_is_rejected() {
        let g = pitch_grid();
        assert!(gaussian_bin_weights(&[f64::NAN], &g).is_err());
    }

    #[test]
    fn one_hot_encoding_returns_the_embedding() {
        let table = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let mut w = Array2::zeros((1, 3));
        w[[0, 1]] = 0.7; // any positive mass on a single bin
        let bw = BinWeights { weights: w };
        let out = encode_with_embeddings(&bw, &table.view()).unwrap();
        assert_eq!(out[[0, 0]], 3.0);
        assert_eq!(out[[0, 1]], 4.0);
    }

    #[test]
    fn equal_weights_give_the_midpoint() {
        let table = array![[1.0, 10.0], [3.0, 30.0], [5.0, 50.0]];
        let bw = BinWeights {
            weights: array![[0.4, 0.0, 0.4]],
        };
        let out = encode_with_embeddings(&bw, &table.view()).unwrap();
        assert_eq!(out[[0, 0]], 3.0);
        assert_eq!(out[[0, 1]], 30.0);
    }

    #[test]
    fn degenerate_row_is_an_error() {
        let table = array![[1.0], [2.0]];
        let bw = BinWeights {
            weights: array![[0.0, 0.0]],
        };
        assert!(matches!(
            encode_with_embeddings::<f64>(&bw, &table.view()),
            Err(Error::DegenerateBinRow { .. })
        ));
    }

    proptest! {
        #[test]
        fn encoding_is_a_convex_combination(
            raw in proptest::collection::vec(0.01f64..1.0, 5),
            col in proptest::collection::vec(-10.0f64..10.0, 5),
        ) {
            let table = Array2::from_shape_vec((5, 1), col.clone()).unwrap();
            let bw = BinWeights {
                weights: Array2::from_shape_vec((1, 5), raw).unwrap(),
            };
            let out = encode_with_embeddings(&bw, &table.view()).unwrap();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out[[0, 0]] >= lo - 1e-12 && out[[0, 0]] <= hi + 1e-12);
        }
    }

    #[test]
    fn voicing_replacement_semantics() {
        let enc = array![[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        let unvoiced = [9.0, 9.5];
        let out = apply_voicing(&enc, &[1, 0, 1], &unvoiced).unwrap();
        assert_eq!(out.row(0).to_vec(), vec![1.0, 1.0]);
        assert_eq!(out.row(1).to_vec(), vec![9.0, 9.5]);
        assert_eq!(out.row(2).to_vec(), vec![3.0, 3.0]);

        let all_voiced = apply_voicing(&enc, &[1, 1, 1], &unvoiced).unwrap();
        assert_eq!(all_voiced, enc);
        let all_unvoiced = apply_voicing(&enc, &[0, 0, 0], &unvoiced).unwrap();
        for r in 0..3 {
            assert_eq!(all_unvoiced.row(r).to_vec(), vec![9.0, 9.5]);
        }
        assert!(apply_voicing(&enc, &[1, 0], &unvoiced).is_err());
    }

    #[test]
    fn decode_one_hot_and_symmetric_pairs() {
        let g = BinGrid::new(0.0, 1.0, 5, 1.0).unwrap();
        let mut w = Array2::zeros((1, 5));
        w[[0, 2]] = 1.0;
        let out = decode_scalar(&BinWeights { weights: w }, &g).unwrap();
        assert_eq!(out[0], g.center(3));

        let mut w = Array2::zeros((1, 5));
        w[[0, 0]] = 0.5;
        w[[0, 2]] = 0.5;
        let out = decode_scalar(&BinWeights { weights: w }, &g).unwrap();
        assert_eq!(out[0], g.center(2));
    }

    #[test]
    fn decode_round_trip_inside_grid_interior() {
        let g = pitch_grid();
        let lo = g.first_center().f64() + 3.0 * g.sigma;
        let hi = g.last_center().f64() - 3.0 * g.sigma;
        let mut v = lo;
        while v <= hi {
            let bw = gaussian_bin_weights(&[v], &g).unwrap();
            let dec = decode_scalar(&bw, &g).unwrap()[0];
            assert!(
                (dec - v).abs() < g.width / 2.0,
                "round trip {v} -> {dec}"
            );
            v += 1.7;
        }
    }
}
