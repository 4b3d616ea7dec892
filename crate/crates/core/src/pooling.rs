//! Permutation-invariant MIL pooling over the instances of a bag.
//!
//! Every operator works per feature dimension on an `m x k` matrix (one row
//! per instance) and yields a length-`k` vector:
//!
//! * max:  `max_j x_j`
//! * mean: `(1/m) sum_j x_j`
//! * LSE:  `(1/r) log((1/m) sum_j exp(r x_j))`, a smooth max that tends to
//!   the mean as `r -> 0` and to the max as `r -> inf`.
//!
//! Max routes its gradient to the lowest-index instance among ties.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

pub const DEFAULT_LSE_R: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMethod {
    Max,
    Mean,
    Lse,
}

impl PoolingMethod {
    pub const ALL: [PoolingMethod; 3] = [PoolingMethod::Max, PoolingMethod::Mean, PoolingMethod::Lse];

    pub fn name(self) -> &'static str {
        match self {
            PoolingMethod::Max => "max",
            PoolingMethod::Mean => "mean",
            PoolingMethod::Lse => "lse",
        }
    }
}

impl fmt::Display for PoolingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoolingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "max" => Ok(PoolingMethod::Max),
            "mean" | "avg" => Ok(PoolingMethod::Mean),
            "lse" | "log-sum-exp" | "logsumexp" => Ok(PoolingMethod::Lse),
            other => Err(Error::config(format!(
                "unknown pooling method '{other}' (expected max, mean or lse)"
            ))),
        }
    }
}

/// Pooling operator plus the LSE sharpness `r` (ignored by max and mean).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolingSpec {
    pub method: PoolingMethod,
    pub r: f64,
}

impl Default for PoolingSpec {
    fn default() -> Self {
        PoolingSpec::max()
    }
}

impl PoolingSpec {
    pub fn new(method: PoolingMethod, r: f64) -> Result<Self> {
        let spec = PoolingSpec { method, r };
        spec.validate()?;
        Ok(spec)
    }

    pub fn max() -> Self {
        PoolingSpec {
            method: PoolingMethod::Max,
            r: DEFAULT_LSE_R,
        }
    }

    pub fn mean() -> Self {
        PoolingSpec {
            method: PoolingMethod::Mean,
            r: DEFAULT_LSE_R,
        }
    }

    pub fn lse(r: f64) -> Result<Self> {
        Self::new(PoolingMethod::Lse, r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.method == PoolingMethod::Lse && !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::config(format!(
                "LSE pooling needs a finite r > 0, got {}",
                self.r
            )));
        }
        Ok(())
    }
}

/// What `pool_backward` needs from the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolCache {
    method: PoolingMethod,
    r: f64,
    instances: usize,
    dims: usize,
    data: CacheData,
}

#[derive(Debug, Clone, PartialEq)]
enum CacheData {
    Argmax(Vec<usize>),
    Mean,
    /// `m x k` softmax weights of `r x` along the instance axis.
    Softmax(Matrix),
}

impl PoolCache {
    pub fn method(&self) -> PoolingMethod {
        self.method
    }

    pub fn instances(&self) -> usize {
        self.instances
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    /// Winning instance per dimension (max pooling only).
    pub fn argmax(&self) -> Option<&[usize]> {
        match &self.data {
            CacheData::Argmax(a) => Some(a),
            _ => None,
        }
    }
}

/// Pools an `m x k` matrix of instance rows into a length-`k` vector.
pub fn pool_forward(spec: &PoolingSpec, instances: &Matrix) -> Result<(Vector, PoolCache)> {
    spec.validate()?;
    let (m, k) = instances.shape();
    if m == 0 {
        return Err(Error::data("bag has zero instances"));
    }
    if k == 0 {
        return Err(Error::shape("instances have zero features"));
    }
    let (out, data) = match spec.method {
        PoolingMethod::Max => {
            let mut out = instances.row(0).to_vec();
            let mut arg = vec![0usize; k];
            for (j, row) in instances.iter_rows().enumerate().skip(1) {
                for d in 0..k {
                    // strict '>' keeps the lowest index among ties
                    if row[d] > out[d] {
                        out[d] = row[d];
                        arg[d] = j;
                    }
                }
            }
            (out, CacheData::Argmax(arg))
        }
        PoolingMethod::Mean => {
            let mut out = vec![0.0; k];
            for row in instances.iter_rows() {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            let inv = 1.0 / m as f64;
            out.iter_mut().for_each(|o| *o *= inv);
            (out, CacheData::Mean)
        }
        PoolingMethod::Lse => {
            let r = spec.r;
            let mut shift = instances.row(0).to_vec();
            for row in instances.iter_rows().skip(1) {
                for (s, v) in shift.iter_mut().zip(row) {
                    if *v > *s {
                        *s = *v;
                    }
                }
            }
            // exp(r (x - max)) <= 1, so nothing overflows
            let mut weights = Matrix::zeros(m, k);
            let mut sums = vec![0.0; k];
            for j in 0..m {
                let row = instances.row(j);
                let w = weights.row_mut(j);
                for d in 0..k {
                    let e = (r * (row[d] - shift[d])).exp();
                    w[d] = e;
                    sums[d] += e;
                }
            }
            let out = (0..k).map(|d| shift[d] + (sums[d] / m as f64).ln() / r).collect();
            for j in 0..m {
                let w = weights.row_mut(j);
                for d in 0..k {
                    w[d] /= sums[d];
                }
            }
            (out, CacheData::Softmax(weights))
        }
    };
    let cache = PoolCache {
        method: spec.method,
        r: spec.r,
        instances: m,
        dims: k,
        data,
    };
    Ok((Vector::new(out)?, cache))
}

/// Distributes `grad_out` (length `k`) back over the `m` instances.
pub fn pool_backward(cache: &PoolCache, spec: &PoolingSpec, grad_out: &[f64]) -> Result<Matrix> {
    if cache.method != spec.method || (spec.method == PoolingMethod::Lse && cache.r != spec.r) {
        return Err(Error::State(format!(
            "pool cache was produced by {} pooling (r = {}), backward requested for {} (r = {})",
            cache.method, cache.r, spec.method, spec.r
        )));
    }
    if grad_out.len() != cache.dims {
        return Err(Error::shape(format!(
            "pool gradient of length {} for {} pooled dimensions",
            grad_out.len(),
            cache.dims
        )));
    }
    let (m, k) = (cache.instances, cache.dims);
    let mut grad = Matrix::zeros(m, k);
    match &cache.data {
        CacheData::Argmax(arg) => {
            for (d, (&j, &g)) in arg.iter().zip(grad_out).enumerate() {
                grad.set(j, d, g);
            }
        }
        CacheData::Mean => {
            let inv = 1.0 / m as f64;
            for j in 0..m {
                for (g, &go) in grad.row_mut(j).iter_mut().zip(grad_out) {
                    *g = go * inv;
                }
            }
        }
        CacheData::Softmax(w) => {
            for j in 0..m {
                let wj = w.row(j);
                for ((g, &go), &p) in grad.row_mut(j).iter_mut().zip(grad_out).zip(wj) {
                    *g = go * p;
                }
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn column(values: &[f64]) -> Matrix {
        Matrix::from_vec(values.len(), 1, values.to_vec()).unwrap()
    }

    fn all_specs() -> Vec<PoolingSpec> {
        vec![PoolingSpec::max(), PoolingSpec::mean(), PoolingSpec::lse(1.0).unwrap()]
    }

    #[test]
    fn single_instance_is_identity() {
        let x = Matrix::from_rows(&[[0.3, -1.2, 7.5]]).unwrap();
        for spec in all_specs() {
            let (out, _) = pool_forward(&spec, &x).unwrap();
            assert_eq!(out.as_slice(), x.row(0), "{:?}", spec.method);
        }
    }

    #[test]
    fn scalar_examples() {
        let (out, _) = pool_forward(&PoolingSpec::max(), &column(&[0.2, 0.7, 0.1])).unwrap();
        assert_eq!(out[0], 0.7);
        let (out, _) = pool_forward(&PoolingSpec::mean(), &column(&[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(out[0], 2.0);
        // log((e^0 + e^{ln 3}) / 2) = ln 2
        let (out, _) = pool_forward(&PoolingSpec::lse(1.0).unwrap(), &column(&[0.0, 3f64.ln()])).unwrap();
        assert!((out[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn empty_bag_is_rejected() {
        let err = pool_forward(&PoolingSpec::max(), &Matrix::zeros(0, 3)).unwrap_err();
        assert!(err.to_string().contains("bag has zero instances"));
    }

    #[test]
    fn lse_needs_positive_r() {
        assert!(PoolingSpec::lse(0.0).is_err());
        assert!(PoolingSpec::lse(-1.0).is_err());
        assert!(PoolingSpec::lse(f64::NAN).is_err());
    }

    #[test]
    fn lse_does_not_overflow() {
        let (out, _) = pool_forward(&PoolingSpec::lse(10.0).unwrap(), &column(&[100.0, 99.0])).unwrap();
        assert!(out[0].is_finite() && out[0] <= 100.0 && out[0] > 99.0);
    }

    #[test]
    fn backward_examples() {
        let (_, cache) = pool_forward(&PoolingSpec::mean(), &column(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        let g = pool_backward(&cache, &PoolingSpec::mean(), &[1.0]).unwrap();
        assert_eq!(g.as_slice(), &[0.25; 4]);

        let (_, cache) = pool_forward(&PoolingSpec::max(), &column(&[0.2, 0.7, 0.1])).unwrap();
        let g = pool_backward(&cache, &PoolingSpec::max(), &[1.0]).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn max_ties_go_to_lowest_index() {
        let (_, cache) = pool_forward(&PoolingSpec::max(), &column(&[0.5, 0.9, 0.9, 0.9])).unwrap();
        let g = pool_backward(&cache, &PoolingSpec::max(), &[2.0]).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_mismatched_cache() {
        let (_, cache) = pool_forward(&PoolingSpec::max(), &column(&[1.0, 2.0])).unwrap();
        assert!(pool_backward(&cache, &PoolingSpec::mean(), &[1.0]).is_err());
        assert!(pool_backward(&cache, &PoolingSpec::max(), &[1.0, 1.0]).is_err());
        let (_, cache) = pool_forward(&PoolingSpec::lse(2.0).unwrap(), &column(&[1.0, 2.0])).unwrap();
        assert!(pool_backward(&cache, &PoolingSpec::lse(3.0).unwrap(), &[1.0]).is_err());
    }

    fn random_matrix(rng: &mut Rng, m: usize, k: usize, lo: f64, hi: f64) -> Matrix {
        Matrix::from_vec(m, k, (0..m * k).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
    }

    #[test]
    fn lse_backward_matches_finite_differences() {
        let mut rng = Rng::new(77);
        let spec = PoolingSpec::lse(3.0).unwrap();
        let x = random_matrix(&mut rng, 5, 8, -1.0, 1.0);
        let c: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let loss = |x: &Matrix| -> f64 {
            let (o, _) = pool_forward(&spec, x).unwrap();
            o.as_slice().iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = pool_forward(&spec, &x).unwrap();
        let g = pool_backward(&cache, &spec, &c).unwrap();
        let h = 1e-5;
        let mut xp = x.clone();
        for idx in 0..40 {
            let orig = xp.as_slice()[idx];
            xp.as_mut_slice()[idx] = orig + h;
            let fp = loss(&xp);
            xp.as_mut_slice()[idx] = orig - h;
            let fm = loss(&xp);
            xp.as_mut_slice()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = g.as_slice()[idx];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
            assert!(rel < 1e-6, "entry {idx}: {analytic} vs {numeric}");
        }
    }

    #[test]
    fn lse_limits_on_unit_range() {
        let mut rng = Rng::new(3);
        for _ in 0..200 {
            let m = rng.int_inclusive(1, 12);
            let x = random_matrix(&mut rng, m, 4, -5.0, 5.0);
            let (mx, _) = pool_forward(&PoolingSpec::max(), &x).unwrap();
            let (mn, _) = pool_forward(&PoolingSpec::mean(), &x).unwrap();
            let (hard, _) = pool_forward(&PoolingSpec::lse(1e3).unwrap(), &x).unwrap();
            let (soft, _) = pool_forward(&PoolingSpec::lse(1e-4).unwrap(), &x).unwrap();
            for d in 0..4 {
                assert!((hard[d] - mx[d]).abs() < 1e-2);
                // Hoeffding: 0 <= LSE_r - mean <= r (b - a)^2 / 8 for inputs in [a, b]
                let bound = 1e-4 * 100.0 / 8.0;
                assert!(soft[d] - mn[d] >= -1e-12 && soft[d] - mn[d] <= bound + 1e-12);
            }
        }
    }

    #[test]
    fn lse_is_monotone_in_r() {
        let mut rng = Rng::new(4);
        let grid = [0.1, 0.5, 1.0, 5.0, 10.0, 100.0];
        for _ in 0..100 {
            let x = random_matrix(&mut rng, 6, 3, -5.0, 5.0);
            let outs: Vec<Vector> = grid
                .iter()
                .map(|&r| pool_forward(&PoolingSpec::lse(r).unwrap(), &x).unwrap().0)
                .collect();
            for w in outs.windows(2) {
                for d in 0..3 {
                    assert!(w[1][d] >= w[0][d] - 1e-12);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn ordering_and_permutation_invariance(
            rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..10),
            r in 0.01f64..50.0,
            seed in any::<u64>(),
        ) {
            let x = Matrix::from_rows(&rows).unwrap();
            let mut perm: Vec<usize> = (0..rows.len()).collect();
            Rng::new(seed).shuffle(&mut perm);
            let xp = x.select_rows(&perm);
            let lse = PoolingSpec::lse(r).unwrap();

            let (mx, _) = pool_forward(&PoolingSpec::max(), &x).unwrap();
            let (mn, _) = pool_forward(&PoolingSpec::mean(), &x).unwrap();
            let (ls, _) = pool_forward(&lse, &x).unwrap();
            for d in 0..3 {
                prop_assert!(mn[d] <= ls[d] + 1e-12 && ls[d] <= mx[d] + 1e-12);
            }
            prop_assert_eq!(pool_forward(&PoolingSpec::max(), &xp).unwrap().0, mx);
            let mnp = pool_forward(&PoolingSpec::mean(), &xp).unwrap().0;
            let lsp = pool_forward(&lse, &xp).unwrap().0;
            for d in 0..3 {
                prop_assert!((mnp[d] - mn[d]).abs() < 1e-12);
                prop_assert!((lsp[d] - ls[d]).abs() < 1e-12);
            }
        }

        #[test]
        fn gradient_is_conserved(
            rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 1..10),
            g in prop::collection::vec(-3.0f64..3.0, 2),
        ) {
            let x = Matrix::from_rows(&rows).unwrap();
            for spec in all_specs() {
                let (_, cache) = pool_forward(&spec, &x).unwrap();
                let grad = pool_backward(&cache, &spec, &g).unwrap();
                for d in 0..2 {
                    let col: Vec<f64> = grad.iter_rows().map(|r| r[d]).collect();
                    let sum: f64 = col.iter().sum();
                    prop_assert!((sum - g[d]).abs() < 1e-12);
                    if spec.method == PoolingMethod::Max {
                        prop_assert!(col.iter().filter(|v| **v != 0.0).count() <= 1);
                    }
                }
            }
        }
    }
}
