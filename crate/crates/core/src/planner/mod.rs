//! Admission control and deployment planning from class SLAs.

mod adapt;
mod admit;

pub use adapt::{Action, Adapter, MonitorSample, DETECTION_MS};
pub use admit::{
    DeploymentPlan, Placement, Planner, PlannerConfig, Rejection, RejectionCode, RuntimeTemplate,
    TemplateRegistry,
};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
pub enum PlannerError {
    #[error("availability target {0} cannot be met")]
    InfeasibleTarget(f64),
    #[error("stability {0} must lie in (0, 1)")]
    InvalidStability(f64),
    #[error("{needed} replicas need {needed} datacenters, {available} eligible")]
    InsufficientDatacenters { needed: u32, available: u32 },
    #[error("datacenter `{dc}` has {available} nodes, {needed} replicas placed there")]
    InsufficientNodes {
        dc: String,
        needed: u32,
        available: u32,
    },
    #[error("unknown datacenter `{0}`")]
    UnknownDatacenter(String),
}

/// Smallest replica count `N` with `1 - (1 - p)^N >= a`.
pub fn replicas_for(a: f64, p: f64) -> Result<u32, PlannerError> {
    if !(a < 1.0) || a.is_nan() {
        return Err(PlannerError::InfeasibleTarget(a));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(PlannerError::InvalidStability(p));
    }
    if a <= 0.0 {
        return Ok(1);
    }
    let q = 1.0 - p;
    let mut n = ((1.0 - a).ln() / q.ln()).ceil().max(1.0) as u32;
    // Correct for rounding in the closed form.
    while n > 1 && 1.0 - q.powi(n as i32 - 1) >= a {
        n -= 1;
    }
    while 1.0 - q.powi(n as i32) < a {
        n += 1;
    }
    Ok(n)
}

/// Availability achieved by `n` replicas of stability `p`.
pub fn availability_of(n: u32, p: f64) -> f64 {
    1.0 - (1.0 - p).powi(n as i32)
}

/// Manual-refinement step: `ceil(target / observed × current)`.
pub fn estimate_pods_baseline(target_rps: f64, observed_rps: f64, current_pods: u32) -> u32 {
    assert!(observed_rps > 0.0, "observed throughput must be positive");
    let next = target_rps / observed_rps * current_pods as f64;
    (next - 1e-9).ceil().max(1.0) as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const P: f64 = 0.9436;

    #[test]
    fn replica_counts_for_reference_stability() {
        let got: Vec<u32> = [0.99, 0.999, 0.9999, 0.99999]
            .iter()
            .map(|&a| replicas_for(a, P).unwrap())
            .collect();
        assert_eq!(got, vec![2, 3, 4, 5]);
        // Brute check against the formula itself.
        assert!(availability_of(1, P) < 0.99 && availability_of(2, P) >= 0.99);
        assert!(availability_of(4, P) < 0.99999 && availability_of(5, P) >= 0.99999);
    }

    #[test]
    fn edge_cases() {
        assert_eq!(replicas_for(1e-9, P), Ok(1));
        assert_eq!(replicas_for(0.0, 0.3), Ok(1));
        assert!(matches!(
            replicas_for(1.0, P),
            Err(PlannerError::InfeasibleTarget(_))
        ));
        assert!(matches!(
            replicas_for(0.9, 1.0),
            Err(PlannerError::InvalidStability(_))
        ));
    }

    #[test]
    fn baseline_formula() {
        assert_eq!(estimate_pods_baseline(10_000.0, 2_500.0, 2), 8);
        assert_eq!(estimate_pods_baseline(400.0, 100.0, 1), 4);
        assert_eq!(estimate_pods_baseline(400.0, 400.0, 13), 13);
    }

    proptest! {
        #[test]
        fn monotone_in_target_and_stability(a1 in 0.0f64..0.99999, a2 in 0.0f64..0.99999, p1 in 0.05f64..0.999, p2 in 0.05f64..0.999) {
            let (alo, ahi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let (plo, phi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            prop_assert!(replicas_for(alo, plo).unwrap() <= replicas_for(ahi, plo).unwrap());
            prop_assert!(replicas_for(ahi, phi).unwrap() <= replicas_for(ahi, plo).unwrap());
        }

        #[test]
        fn result_is_minimal(a in 0.0f64..0.999999, p in 0.01f64..0.999) {
            let n = replicas_for(a, p).unwrap();
            prop_assert!(availability_of(n, p) >= a);
            prop_assert!(n == 1 || availability_of(n - 1, p) < a);
        }
    }
}
