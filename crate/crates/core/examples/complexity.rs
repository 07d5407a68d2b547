//! FLOPs and parameter counts of the reference ResNets at 3x256x128.

use chanprune::graph::{build_resnet_shape, count_flops, count_params};

fn main() -> anyhow::Result<()> {
    for variant in [18, 34, 50] {
        let g = build_resnet_shape(variant)?;
        let flops = count_flops(&g, &[1, 3, 256, 128])?;
        let params = count_params(&g);
        println!(
            "resnet{variant}: {:.3} GFLOPs, {:.3} M params",
            flops as f64 / 1e9,
            params as f64 / 1e6
        );
    }
    Ok(())
}
