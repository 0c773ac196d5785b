//! Six-value rotation encoding on the upper-body skeleton.

use gesture_tokens::motion::rot6d;
use gesture_tokens::motion::SkeletonSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let skeleton = SkeletonSpec::upper_body();
    let (left, right) = skeleton.arms();
    println!("{} joints", skeleton.joint_count());
    println!("left arm:  {:?}", left.map(|j| skeleton.names[j]));
    println!("right arm: {:?}", right.map(|j| skeleton.names[j]));

    let r = rot6d::axis_angle([0.0, 0.6, 0.8], 1.1);
    let six = rot6d::encode(&r)?;
    let back = rot6d::decode(&six)?;
    println!("6D {six:.4?}");
    println!("round-trip error {:.2e}", (back - r).abs().max());

    // a network output is rarely orthonormal; projection fixes that
    let noisy: Vec<f64> = six.iter().enumerate().map(|(i, v)| v + 0.05 * (i as f64 - 2.5)).collect();
    let fixed = rot6d::orthonormalize(&noisy)?;
    let m = rot6d::decode(&fixed)?;
    println!("projected determinant {:.6}", m.determinant());
    Ok(())
}
