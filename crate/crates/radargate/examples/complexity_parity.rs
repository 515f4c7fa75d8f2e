//! Analytic cost formulas next to the instrumented multiply-accumulate count
//! of the real forward path, across widths.
//!
//! Run with: cargo run --example complexity_parity

use radargate::costmodel::{analytic_ratio_limit, parity_sweep, CostParams};

fn main() -> radargate::Result<()> {
    let base = CostParams::default_parity(64);
    println!(
        "n = {}, r = {}, k = {}, r_a = {}, L = {}",
        base.n, base.r, base.k, base.r_a, base.l
    );
    println!(
        "{:>6} {:>12} {:>12} {:>12} {:>12} {:>8} {:>8}",
        "d", "O_s", "O_r", "counted_s", "counted_r", "ratio", "brkt_r"
    );
    let reports = parity_sweep(&[64, 128, 256, 512, 1024, 2048, 4096], &base, 1)?;
    for r in &reports {
        println!(
            "{:>6} {:>12} {:>12} {:>12} {:>12} {:>8.4} {:>8.3}",
            r.d,
            r.analytic_flops_stretch,
            r.analytic_flops_radar,
            r.counted_flops_stretch,
            r.counted_flops_radar,
            r.ratio,
            r.counted_flops_radar as f64 / r.analytic_flops_radar as f64,
        );
    }
    println!(
        "\nanalytic ratio limit as d grows: {:.4} (same order of magnitude)",
        analytic_ratio_limit(&base)
    );
    Ok(())
}
