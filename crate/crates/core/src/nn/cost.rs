//! Parameter and compute accounting for deployed policies.

use super::MlpSpec;

/// Throughput of the reference control DSP, in MFLOPS.
pub const DSP_THROUGHPUT_MFLOPS: f64 = 800.0;

/// Weights plus biases over all dense layers of the deployed network
/// (trunk and mean head; the std head is not deployed).
pub fn param_count(spec: &MlpSpec) -> u64 {
    spec.layer_shapes().iter().map(|&(i, o)| (i * o + o) as u64).sum()
}

/// One multiply and one add per weight; biases and activations are not
/// counted.
pub fn inference_flops(spec: &MlpSpec) -> u64 {
    2 * spec.layer_shapes().iter().map(|&(i, o)| (i * o) as u64).sum::<u64>()
}

/// Single-pass execution time in microseconds at the given throughput.
pub fn estimated_time_us(flops: u64, throughput_mflops: f64) -> f64 {
    assert!(throughput_mflops > 0.0, "throughput must be positive");
    flops as f64 / (throughput_mflops * 1e6) * 1e6
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_layer_counts() {
        let spec = MlpSpec::new(3, &[], 2);
        assert_eq!(param_count(&spec), 8);
        assert_eq!(inference_flops(&spec), 12);
    }

    #[test]
    fn time_scales_inversely_with_throughput() {
        assert!((estimated_time_us(1600, 800.0) - 2.0).abs() < 1e-12);
        assert!((estimated_time_us(1600, 1600.0) - 1.0).abs() < 1e-12);
    }
}
