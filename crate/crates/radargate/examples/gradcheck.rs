//! Finite-difference validation of the analytic gradients on a batch of
//! random configurations spanning both gate variants and both rotation
//! parameterizations.
//!
//! Run with: cargo run --example gradcheck

use radargate::grads::gradcheck_sweep;

fn main() -> radargate::Result<()> {
    let (rows, max_err) = gradcheck_sweep(2024, 20, 1e-5, false)?;
    println!(
        "{:<4} {:<12} {:>2} {:>5} {:>6} {:>2}  {:>10}  {:>10}",
        "id", "variant", "n", "d_in", "d_out", "k", "err_s", "err_r"
    );
    for row in &rows {
        match (row.err_s, row.err_r) {
            (Some(es), Some(er)) => println!(
                "{:<4} {:<12} {:>2} {:>5} {:>6} {:>2}  {:>10.3e}  {:>10.3e}",
                row.config_id, row.mode, row.n, row.d_in, row.d_out, row.k, es, er
            ),
            _ => println!(
                "{:<4} {:<12} skipped (selection unstable)",
                row.config_id, row.mode
            ),
        }
    }
    println!("\nmax relative error: {max_err:.3e} (threshold 1e-5)");
    assert!(max_err < 1e-5);
    Ok(())
}
