//! Compares every differentiable op against central finite differences in
//! double precision.

use gesture_tokens::tensor::gradcheck::gradient_check;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let t = std::time::Instant::now();
    let report = gradient_check(0)?;
    for e in &report.entries {
        println!("{:<16} {:>5} values  max relative error {:.2e}", e.op, e.checked, e.max_rel_error);
    }
    println!("worst {:.2e} in {:.2}s", report.worst(), t.elapsed().as_secs_f64());
    Ok(())
}
