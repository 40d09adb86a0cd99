//! Synthetic workloads shared by the Hessian benchmarks.

use bls_core::ift::{ift_jacobian, total_hessian};
use bls_core::instances::random_bundles;
use bls_core::{
    FirstOrderBundle, HessianMode, HessianStrategy, Matrix, SecondOrderBundle, SensitivityResult,
};

/// Bundles and their implicit Jacobian at one evaluation point.
pub struct Workload {
    pub first: FirstOrderBundle,
    pub second: SecondOrderBundle,
    pub sensitivity: SensitivityResult,
}

impl Workload {
    /// `m` lower variables, `n` parameters; same seed, same data.
    pub fn new(m: usize, n: usize, seed: u64) -> bls_core::Result<Self> {
        let (first, second) = random_bundles(m, n, seed)?;
        let sensitivity = ift_jacobian(&first, 0.0)?;
        Ok(Self {
            first,
            second,
            sensitivity,
        })
    }

    pub fn hessian(&self, strategy: HessianStrategy) -> bls_core::Result<Matrix> {
        total_hessian(
            &self.first,
            &self.second,
            &self.sensitivity,
            HessianMode::General,
            strategy,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategies_agree_on_a_workload() {
        let w = Workload::new(12, 3, 1).unwrap();
        let fast = w.hessian(HessianStrategy::Fast).unwrap();
        let full = w.hessian(HessianStrategy::Full).unwrap();
        let diff: f64 = fast
            .as_slice()
            .iter()
            .zip(full.as_slice())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff < 1e-9 * fast.as_slice().iter().map(|v| v.abs()).sum::<f64>());
    }
}
