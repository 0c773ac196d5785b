use nalgebra::{Matrix3, Vector3};

use super::MotionError;

const TOL: f64 = 1e-6;

/// First two columns of a proper rotation, `(c1x, c1y, c1z, c2x, c2y, c2z)`.
pub fn encode(r: &Matrix3<f64>) -> Result<[f64; 6], MotionError> {
    let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = r.determinant();
    if !(orth <= TOL && (det - 1.0).abs() <= TOL) {
        return Err(MotionError::NotRotation { orthogonality: orth, det });
    }
    Ok([r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]])
}

/// Gram–Schmidt reconstruction of a rotation from six values.
pub fn decode(v: &[f64]) -> Result<Matrix3<f64>, MotionError> {
    if v.len() != 6 || !v.iter().all(|x| x.is_finite()) {
        return Err(MotionError::Degenerate(format!("expected six finite values, got {v:?}")));
    }
    let a1 = Vector3::new(v[0], v[1], v[2]);
    let a2 = Vector3::new(v[3], v[4], v[5]);
    let n1 = a1.norm();
    if n1 < 1e-9 {
        return Err(MotionError::Degenerate("first column is near zero".into()));
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(&a2);
    let n2 = u2.norm();
    if n2 < 1e-9 * a2.norm().max(1.0) {
        return Err(MotionError::Degenerate("columns are parallel or second is zero".into()));
    }
    let b2 = u2 / n2;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

/// Projects six values onto the nearest valid encoding (decode then encode).
pub fn orthonormalize(v: &[f64]) -> Result<[f64; 6], MotionError> {
    let r = decode(v)?;
    Ok([r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]])
}

/// Rotation by `angle` radians about a unit `axis`.
pub fn axis_angle(axis: [f64; 3], angle: f64) -> Matrix3<f64> {
    let a = Vector3::new(axis[0], axis[1], axis[2]).normalize();
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_unchecked(a), angle).into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_encodes_to_basis_columns() {
        assert_eq!(encode(&Matrix3::identity()).unwrap(), [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let e = encode(&r).unwrap();
        let want = [0.0, 1.0, 0.0, -1.0, 0.0, 0.0];
        for (a, b) in e.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_examples() {
        let id = Matrix3::identity();
        for v in [[1.0, 0.0, 0.0, 0.0, 1.0, 0.0], [1.0, 0.0, 0.0, 1.0, 1.0, 0.0], [2.0, 0.0, 0.0, 0.0, 3.0, 0.0]] {
            assert!((decode(&v).unwrap() - id).abs().max() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(decode(&[0.0, 0.0, 0.0, 0.0, 1.0, 0.0]).is_err());
        assert!(decode(&[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]).is_err());
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(encode(&reflect).is_err());
        assert!(encode(&(Matrix3::identity() * 2.0)).is_err());
    }

    #[test]
    fn random_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let r = axis_angle(axis, rng.random_range(-3.1..3.1));
            let back = decode(&encode(&r).unwrap()).unwrap();
            assert!((back - r).abs().max() <= 1e-6);
        }
    }

    proptest::proptest! {
        #[test]
        fn decode_yields_proper_rotation(v in proptest::array::uniform6(-2.0f64..2.0)) {
            if let Ok(r) = decode(&v) {
                let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
                proptest::prop_assert!(orth <= 1e-6);
                proptest::prop_assert!((r.determinant() - 1.0).abs() <= 1e-6);
                // idempotent: re-encoding a decoded pose is stable
                let again = orthonormalize(&encode(&r).unwrap()).unwrap();
                let once = encode(&r).unwrap();
                for (a, b) in again.iter().zip(once) {
                    proptest::prop_assert!((a - b).abs() <= 1e-6);
                }
            }
        }
    }
}
