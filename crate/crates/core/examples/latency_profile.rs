//! Per-image inference latency of the fused model and of each backbone alone.
//!
//! cargo run --release --example latency_profile

use dualfer::eval::{compare_components, profile_latency};
use dualfer::fusion::{build_model, ModelConfig};

fn main() -> dualfer::Result<()> {
    let config = ModelConfig::default();
    let mut model = build_model::<f32>(&config, 0)?;
    let stats = profile_latency(&mut model, [1, 3, 224, 224], 3, 10)?;
    println!(
        "fused, batch 1: {:.2} ± {:.2} ms (min {:.2}, max {:.2}) over {} runs after {} warmup",
        stats.mean_ms, stats.std_ms, stats.min_ms, stats.max_ms, stats.measured_runs, stats.warmup_runs
    );

    let cmp = compare_components(&config, 1, 2, 5)?;
    println!("ShuffleNet V2  {:>8.2} ms", cmp.shufflenet.mean_ms);
    println!("EfficientViT   {:>8.2} ms", cmp.efficientvit.mean_ms);
    println!("fused          {:>8.2} ms  ({:.2} of the sum)", cmp.fused.mean_ms, cmp.fused_over_sum);
    println!("host: {:?}", cmp.environment);
    Ok(())
}
