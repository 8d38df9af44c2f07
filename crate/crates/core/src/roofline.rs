//! Roofline classification against a hardware profile.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RooflineError {
    #[error("arithmetic intensity is undefined for a model that moves zero bytes")]
    ZeroTraffic,
    #[error("invalid hardware profile '{name}': {reason}")]
    InvalidProfile { name: String, reason: String },
    #[error("unknown profile '{0}' (not a builtin name or readable file)")]
    UnknownProfile(String),
    #[error("cannot read profile {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse profile {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Peak compute and memory bandwidth of a target device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub name: String,
    /// 10^9 FLOPs per second.
    pub peak_gflops: f64,
    /// 10^9 bytes per second.
    pub bandwidth_gbps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl HardwareProfile {
    pub fn new(name: &str, peak_gflops: f64, bandwidth_gbps: f64) -> Result<Self, RooflineError> {
        let p = HardwareProfile {
            name: name.to_string(),
            peak_gflops,
            bandwidth_gbps,
            description: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), RooflineError> {
        for (what, v) in [("peak_gflops", self.peak_gflops), ("bandwidth_gbps", self.bandwidth_gbps)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(RooflineError::InvalidProfile {
                    name: self.name.clone(),
                    reason: format!("{what} must be positive and finite, got {v}"),
                });
            }
        }
        Ok(())
    }

    /// FLOPs per second.
    pub fn peak_compute(&self) -> f64 {
        self.peak_gflops * 1e9
    }

    /// Bytes per second.
    pub fn mem_bandwidth(&self) -> f64 {
        self.bandwidth_gbps * 1e9
    }

    /// FLOPs per byte at which compute and transfer times are equal.
    pub fn ridge_intensity(&self) -> f64 {
        self.peak_gflops / self.bandwidth_gbps
    }
}

/// Example devices. The figures are illustrative orders of magnitude, not
/// measurements of any product.
pub fn builtin_profiles() -> Vec<HardwareProfile> {
    vec![
        HardwareProfile {
            name: "edge-npu".into(),
            peak_gflops: 4000.0,
            bandwidth_gbps: 8.0,
            description: Some("illustrative edge NPU: 4 TFLOP/s peak, 8 GB/s LPDDR".into()),
        },
        HardwareProfile {
            name: "mobile-gpu".into(),
            peak_gflops: 1000.0,
            bandwidth_gbps: 25.6,
            description: Some("illustrative mobile GPU: 1 TFLOP/s peak, 25.6 GB/s shared DRAM".into()),
        },
    ]
}

/// Resolves a builtin profile name or a JSON file path.
pub fn load_profile(spec: &str) -> Result<HardwareProfile, RooflineError> {
    if let Some(p) = builtin_profiles().into_iter().find(|p| p.name == spec) {
        return Ok(p);
    }
    let path = Path::new(spec);
    if !path.is_file() {
        return Err(RooflineError::UnknownProfile(spec.to_string()));
    }
    let text = std::fs::read_to_string(path).map_err(|source| RooflineError::Io {
        path: spec.to_string(),
        source,
    })?;
    let profile: HardwareProfile = serde_json::from_str(&text).map_err(|source| RooflineError::Parse {
        path: spec.to_string(),
        source,
    })?;
    profile.validate()?;
    Ok(profile)
}

/// FLOPs per byte moved.
pub fn arithmetic_intensity(flops: u64, bytes: u64) -> Result<f64, RooflineError> {
    if bytes == 0 {
        return Err(RooflineError::ZeroTraffic);
    }
    Ok(flops as f64 / bytes as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bound {
    Compute,
    Bandwidth,
}

impl Bound {
    pub fn as_str(self) -> &'static str {
        match self {
            Bound::Compute => "compute",
            Bound::Bandwidth => "bandwidth",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Classification {
    pub bound: Bound,
    /// Seconds.
    pub compute_time: f64,
    pub transfer_time: f64,
    pub latency_floor: f64,
}

/// Classifies a workload on `profile`.
///
/// The bound is decided by comparing arithmetic intensity with the ridge
/// point; a workload exactly on the ridge counts as compute-bound. With
/// `overlap` the floor is `max(compute, transfer)` (double buffering hides
/// the shorter phase), otherwise their sum.
pub fn classify(flops: u64, bytes: u64, profile: &HardwareProfile, overlap: bool) -> Classification {
    let compute_time = flops as f64 / profile.peak_compute();
    let transfer_time = bytes as f64 / profile.mem_bandwidth();
    let intensity = if bytes == 0 {
        if flops == 0 { 0.0 } else { f64::INFINITY }
    } else {
        flops as f64 / bytes as f64
    };
    let bound = if intensity < profile.ridge_intensity() {
        Bound::Bandwidth
    } else {
        Bound::Compute
    };
    let latency_floor = if overlap {
        compute_time.max(transfer_time)
    } else {
        compute_time + transfer_time
    };
    Classification {
        bound,
        compute_time,
        transfer_time,
        latency_floor,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn profile(gflops: f64, gbps: f64) -> HardwareProfile {
        HardwareProfile::new("t", gflops, gbps).unwrap()
    }

    #[test]
    fn intensity_examples() {
        let i = arithmetic_intensity(864, 4272).unwrap();
        assert!((i - 0.2022).abs() < 1e-4);
        assert_eq!(arithmetic_intensity(0, 10).unwrap(), 0.0);
        assert!(matches!(arithmetic_intensity(5, 0), Err(RooflineError::ZeroTraffic)));
        let half = arithmetic_intensity(864, 2 * 4272).unwrap();
        assert_eq!(half * 2.0, i);
    }

    #[test]
    fn bandwidth_bound_example() {
        let c = classify(1_000_000_000, 100_000_000, &profile(1000.0, 10.0), true);
        assert_eq!(c.bound, Bound::Bandwidth);
        assert!((c.compute_time - 1e-3).abs() < 1e-15);
        assert!((c.transfer_time - 1e-2).abs() < 1e-15);
        assert_eq!(c.latency_floor, c.transfer_time);
    }

    #[test]
    fn faster_memory_flips_to_compute() {
        let c = classify(1_000_000_000, 100_000_000, &profile(1000.0, 1000.0), true);
        assert_eq!(c.bound, Bound::Compute);
        assert!((c.latency_floor - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn zero_flops_is_bandwidth_bound() {
        assert_eq!(classify(0, 100, &profile(1.0, 1.0), true).bound, Bound::Bandwidth);
    }

    #[test]
    fn tie_is_compute_bound() {
        assert_eq!(classify(100, 100, &profile(1.0, 1.0), true).bound, Bound::Compute);
    }

    #[test]
    fn no_overlap_sums() {
        let c = classify(1_000_000_000, 100_000_000, &profile(1000.0, 10.0), false);
        assert!((c.latency_floor - 11e-3).abs() < 1e-15);
    }

    #[test]
    fn invalid_profiles_rejected() {
        assert!(HardwareProfile::new("z", 0.0, 1.0).is_err());
        assert!(HardwareProfile::new("n", 1.0, f64::NAN).is_err());
        assert!(matches!(load_profile("no-such-profile"), Err(RooflineError::UnknownProfile(_))));
    }

    #[test]
    fn builtins_resolve_and_are_valid() {
        for p in builtin_profiles() {
            p.validate().unwrap();
            assert_eq!(load_profile(&p.name).unwrap(), p);
            assert!(p.description.as_deref().unwrap().contains("illustrative"));
        }
    }

    #[test]
    fn profile_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        std::fs::write(&path, r#"{"name":"lab","peak_gflops":2.5,"bandwidth_gbps":0.5}"#).unwrap();
        let p = load_profile(path.to_str().unwrap()).unwrap();
        assert_eq!((p.name.as_str(), p.ridge_intensity()), ("lab", 5.0));
    }

    proptest! {
        #[test]
        fn floor_is_max(flops in 0u64..1u64 << 50, bytes in 0u64..1u64 << 45,
                        gflops in 0.001f64..1e5, gbps in 0.001f64..1e4) {
            let c = classify(flops, bytes, &profile(gflops, gbps), true);
            prop_assert_eq!(c.latency_floor, c.compute_time.max(c.transfer_time));
        }

        #[test]
        fn bound_matches_ridge(flops in 0u64..1u64 << 50, bytes in 1u64..1u64 << 45,
                               gflops in 0.001f64..1e5, gbps in 0.001f64..1e4) {
            let p = profile(gflops, gbps);
            let c = classify(flops, bytes, &p, true);
            let below = arithmetic_intensity(flops, bytes).unwrap() < p.ridge_intensity();
            prop_assert_eq!(c.bound == Bound::Bandwidth, below);
        }

        #[test]
        fn scale_invariant(flops in 0u64..1u64 << 40, bytes in 1u64..1u64 << 40,
                           gflops in 0.01f64..1e4, gbps in 0.01f64..1e3, k in 1u32..10) {
            let scale = f64::from(1u32 << k);
            let a = classify(flops, bytes, &profile(gflops, gbps), true).bound;
            let b = classify(flops, bytes, &profile(gflops * scale, gbps * scale), true).bound;
            prop_assert_eq!(a, b);
        }

        #[test]
        fn larger_phase_decides_away_from_ties(flops in 1u64..1u64 << 40, bytes in 1u64..1u64 << 40,
                                               gflops in 0.01f64..1e4, gbps in 0.01f64..1e3) {
            let c = classify(flops, bytes, &profile(gflops, gbps), true);
            let rel = (c.compute_time - c.transfer_time).abs() / c.latency_floor;
            prop_assume!(rel > 1e-9);
            let expected = if c.transfer_time > c.compute_time { Bound::Bandwidth } else { Bound::Compute };
            prop_assert_eq!(c.bound, expected);
        }
    }
}
