//! Parameter counts per component and against the reported budgets.
//!
//! cargo run --release --example param_budget

use dualfer::eval::ParamSummary;
use dualfer::fusion::{build_model, ModelConfig};
use dualfer::train::freeze_backbones;

fn main() -> dualfer::Result<()> {
    let mut model = build_model::<f32>(&ModelConfig::default(), 0)?;
    let s = ParamSummary::of(&model);
    println!("ShuffleNet V2   {:>9}", s.shufflenet);
    println!("EfficientViT    {:>9}", s.efficientvit);
    println!("classifier      {:>9}", s.head);
    println!("fused total     {:>9}  ({:.3} of 5.9M)", s.total, s.total as f64 / 5.9e6);

    let head = |d: usize| d * 1000 + 1000;
    let shuffle = s.shufflenet + head(1024);
    let vit = s.efficientvit + head(192);
    println!("ShuffleNet + 1000-way head   {shuffle:>9}  ({:.3} of 2.3M)", shuffle as f64 / 2.3e6);
    println!("EfficientViT + 1000-way head {vit:>9}  ({:.3} of 4.2M)", vit as f64 / 4.2e6);

    freeze_backbones(&mut model);
    println!("trainable with frozen backbones: {}", model.count_params(true));
    Ok(())
}
