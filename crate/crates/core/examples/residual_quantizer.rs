//! How the residual shrinks as quantization depth grows.

use gesture_tokens::rqvae::{rq_dequantize, rq_quantize, Codebook};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (codes, dim, n) = (256, 16, 2000);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let book = Codebook::random(codes, dim, 0.6, &mut rng)?;
    let z: Vec<f32> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let energy = z.iter().map(|v| v * v).sum::<f32>() / n as f32;
    println!("mean latent energy {energy:.4}");
    for depth in [1, 2, 4, 8] {
        let stack = rq_quantize(&z, &book, depth)?;
        let approx = rq_dequantize(&stack.codes, depth, &book)?;
        let err = z.iter().zip(&approx).map(|(a, b)| (a - b).powi(2)).sum::<f32>() / n as f32;
        println!("depth {depth}: squared error {err:.4} ({:.1}% of energy)", 100.0 * err / energy);
    }
    Ok(())
}
