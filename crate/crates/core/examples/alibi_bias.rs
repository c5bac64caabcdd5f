//! Per-head ALiBi slopes and the symmetric bias they produce.
//!
//! `cargo run --example alibi_bias`

use longbert::alibi::{AlibiSlopes, AttentionBias, BiasVariant};
use longbert::tensor::MASK_PENALTY;

fn main() -> longbert::Result<()> {
    for n in [1, 2, 8, 12, 16] {
        let s = AlibiSlopes::compute(n)?;
        let shown: Vec<String> = s.slopes().iter().map(|m| format!("{m:.4e}")).collect();
        println!("{n:>2} heads (a={}, b={:.4}): {}", s.a(), s.b(), shown.join(" "));
    }
    let canonical = AlibiSlopes::canonical(8)?;
    println!("canonical 8-head slopes: {:?}", canonical.slopes());

    let slopes = AlibiSlopes::compute(2)?;
    for variant in [BiasVariant::Encoder, BiasVariant::Causal] {
        let bias = AttentionBias::build(&slopes, 5, variant)?;
        println!("\n{variant:?} bias, head 0:");
        for i in 0..5 {
            let row: Vec<String> = (0..5)
                .map(|j| {
                    let v = bias.value(0, i, j);
                    if v <= MASK_PENALTY { "   -inf".into() } else { format!("{:7.3}", v + 0.0) }
                })
                .collect();
            println!("{}", row.join(" "));
        }
    }

    // Nothing is tied to a maximum length.
    let far = AttentionBias::build(&slopes, 8192, BiasVariant::Encoder)?;
    println!("\nbias(0, 8191) at length 8192: {:.3}", far.value(0, 0, 8191));
    Ok(())
}
