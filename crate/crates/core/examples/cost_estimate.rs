//! Back-of-envelope FLOPs: one transfer versus fine-tuning the target.

use bico::diag::estimate_cost;

fn main() {
    // 88M-parameter source onto a 304M-parameter target, 64 inputs of 257 tokens
    let (p_a, p_b) = (88_000_000, 304_000_000);
    let c = estimate_cost(p_a, p_b, 4 * 24, 64 * 257, 768, 1024, 2000);
    println!("calibration passes {:.3e}", c.calib_flops);
    println!("alignment          {:.3e}", c.alignment_flops);
    println!("transfer total     {:.3e}", c.bico_total);
    println!("fine-tune target   {:.3e}", c.finetune_flops);
    println!("ratio              {:.0}x", c.finetune_flops / c.bico_total);
}
