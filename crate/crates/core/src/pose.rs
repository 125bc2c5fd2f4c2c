//! SMPL pose vectors: 3-d root translation plus 24 joints in the 6D rotation
//! representation (first two columns of the rotation matrix, recovered by
//! Gram-Schmidt). 3 + 24*6 = 147.

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 24; // global orientation + 23 body joints
pub const POSE_DIM: usize = 3 + NUM_JOINTS * 6;

// compile-time layout check
const _: () = assert!(POSE_DIM == 147);

const DEGENERACY_EPS: f64 = 1e-8;

pub type Mat3 = [[f64; 3]; 3];

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm3(a: &[f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

/// Gram-Schmidt recovery of a rotation matrix from the 6D representation
/// (two 3-d columns). Degenerate inputs are an error, tagged with the
/// frame/joint the caller supplies.
pub fn sixd_to_rotmat(r: &[f64; 6]) -> Result<Mat3> {
    sixd_to_rotmat_at(r, 0, 0)
}

pub fn sixd_to_rotmat_at(r: &[f64; 6], frame: usize, joint: usize) -> Result<Mat3> {
    let a = [r[0], r[1], r[2]];
    let b = [r[3], r[4], r[5]];
    let na = norm3(&a);
    if !na.is_finite() || na <= DEGENERACY_EPS {
        return Err(Error::DegenerateRotation {
            frame,
            joint,
            reason: "first column norm below epsilon",
        });
    }
    let c1 = [a[0] / na, a[1] / na, a[2] / na];
    let proj = dot3(&c1, &b);
    let res = [b[0] - proj * c1[0], b[1] - proj * c1[1], b[2] - proj * c1[2]];
    let nr = norm3(&res);
    if !nr.is_finite() || nr <= DEGENERACY_EPS {
        return Err(Error::DegenerateRotation {
            frame,
            joint,
            reason: "second column parallel to first",
        });
    }
    let c2 = [res[0] / nr, res[1] / nr, res[2] / nr];
    let c3 = cross3(&c1, &c2);
    Ok([
        [c1[0], c2[0], c3[0]],
        [c1[1], c2[1], c3[1]],
        [c1[2], c2[2], c3[2]],
    ])
}

/// First two columns of a rotation matrix. Rejects inputs that are not
/// proper rotations (orthonormality within 1e-4, positive determinant).
pub fn rotmat_to_sixd(m: &Mat3) -> Result<[f64; 6]> {
    let col = |j: usize| [m[0][j], m[1][j], m[2][j]];
    let c0 = col(0);
    let c1 = col(1);
    let c2 = col(2);
    let tol = 1e-4;
    for (i, c) in [&c0, &c1, &c2].iter().enumerate() {
        if (norm3(c) - 1.0).abs() > tol {
            return Err(Error::NotARotation(format!("column {i} not unit length")));
        }
    }
    if dot3(&c0, &c1).abs() > tol || dot3(&c0, &c2).abs() > tol || dot3(&c1, &c2).abs() > tol {
        return Err(Error::NotARotation("columns not orthogonal".into()));
    }
    if det3(m) <= 0.0 {
        return Err(Error::NotARotation("determinant not positive".into()));
    }
    Ok([c0[0], c0[1], c0[2], c1[0], c1[1], c1[2]])
}

pub fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Rotation matrix from an axis-angle vector (Rodrigues).
pub fn axis_angle_to_rotmat(axis: &[f64; 3], angle: f64) -> Mat3 {
    let n = norm3(axis).max(1e-12);
    let (x, y, z) = (axis[0] / n, axis[1] / n, axis[2] / n);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Geodesic angle between two rotations, in radians.
pub fn rotation_angle_between(a: &Mat3, b: &Mat3) -> f64 {
    // trace(aᵀ b)
    let mut tr = 0.0;
    for i in 0..3 {
        for k in 0..3 {
            tr += a[k][i] * b[k][i];
        }
    }
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// One conductor pose: root translation plus 24 joint rotations in 6D.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseFrame {
    pub translation: [f64; 3],
    pub rotations: [[f64; 6]; NUM_JOINTS],
}

impl PoseFrame {
    /// Rest pose: zero translation, identity rotations.
    pub fn rest() -> Self {
        PoseFrame {
            translation: [0.0; 3],
            rotations: [[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]; NUM_JOINTS],
        }
    }
}

/// Layout: translation first, then joints in SMPL order (root orientation,
/// then the 23 body joints), 6 values each.
pub fn pack_pose(frame: &PoseFrame) -> [f64; POSE_DIM] {
    let mut v = [0.0; POSE_DIM];
    v[..3].copy_from_slice(&frame.translation);
    for (j, rot) in frame.rotations.iter().enumerate() {
        v[3 + j * 6..3 + (j + 1) * 6].copy_from_slice(rot);
    }
    v
}

pub fn unpack_pose(v: &[f64]) -> Result<PoseFrame> {
    if v.len() != POSE_DIM {
        return Err(Error::ShapeMismatch {
            expected: format!("{POSE_DIM} values"),
            got: format!("{}", v.len()),
            context: "unpack_pose",
        });
    }
    let mut frame = PoseFrame::rest();
    frame.translation.copy_from_slice(&v[..3]);
    for j in 0..NUM_JOINTS {
        frame.rotations[j].copy_from_slice(&v[3 + j * 6..3 + (j + 1) * 6]);
    }
    Ok(frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn mat_close(a: &Mat3, b: &Mat3, tol: f64) -> bool {
        (0..3).all(|i| (0..3).all(|j| (a[i][j] - b[i][j]).abs() < tol))
    }

    const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    /// QR-style random rotation: Gram-Schmidt of a Gaussian matrix.
    pub fn random_rotation(rng: &mut ChaCha20Rng) -> Mat3 {
        loop {
            let r6 = [
                randn(rng),
                randn(rng),
                randn(rng),
                randn(rng),
                randn(rng),
                randn(rng),
            ];
            if let Ok(m) = sixd_to_rotmat(&r6) {
                return m;
            }
        }
    }

    #[test]
    fn identity_sixd_gives_identity() {
        let m = sixd_to_rotmat(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(mat_close(&m, &IDENTITY, 1e-12));
    }

    #[test]
    fn scaled_columns_still_give_identity() {
        let m = sixd_to_rotmat(&[2.0, 0.0, 0.0, 0.0, 3.0, 0.0]).unwrap();
        assert!(mat_close(&m, &IDENTITY, 1e-12));
    }

    #[test]
    fn degenerate_inputs_rejected_with_indices() {
        match sixd_to_rotmat_at(&[0.0; 6], 7, 13) {
            Err(Error::DegenerateRotation { frame, joint, .. }) => {
                assert_eq!((frame, joint), (7, 13));
            }
            other => panic!("expected degenerate error, got {:?}", other.map(|_| ())),
        }
        // parallel columns
        assert!(sixd_to_rotmat(&[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn rotmat_to_sixd_identity_and_z90() {
        assert_eq!(
            rotmat_to_sixd(&IDENTITY).unwrap(),
            [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]
        );
        // 90 degrees about z: columns (0,1,0) and (-1,0,0)
        let rz = axis_angle_to_rotmat(&[0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let s = rotmat_to_sixd(&rz).unwrap();
        let expected = [0.0, 1.0, 0.0, -1.0, 0.0, 0.0];
        for (a, b) in s.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rotmat_to_sixd_rejects_non_rotation() {
        let scaled = [[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]];
        assert!(rotmat_to_sixd(&scaled).is_err());
        let reflection = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(rotmat_to_sixd(&reflection).is_err());
    }

    #[test]
    fn roundtrip_1000_random_rotations_below_1e6() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let mut max_err: f64 = 0.0;
        for _ in 0..1000 {
            let r = random_rotation(&mut rng);
            let six = rotmat_to_sixd(&r).unwrap();
            let back = sixd_to_rotmat(&six).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    max_err = max_err.max((r[i][j] - back[i][j]).abs());
                }
            }
            // proper rotation: orthonormal, det +1
            assert!((det3(&back) - 1.0).abs() < 1e-6);
            for a in 0..3 {
                for b in 0..3 {
                    let mut d = 0.0;
                    for k in 0..3 {
                        d += back[k][a] * back[k][b];
                    }
                    let expect = if a == b { 1.0 } else { 0.0 };
                    assert!((d - expect).abs() < 1e-6);
                }
            }
        }
        assert!(max_err < 1e-6, "max roundtrip error {max_err}");
    }

    #[test]
    fn pack_unpack_roundtrip_bit_exact() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut frame = PoseFrame::rest();
        frame.translation = [1.0, 2.0, 3.0];
        for j in 0..NUM_JOINTS {
            let r = random_rotation(&mut rng);
            frame.rotations[j] = rotmat_to_sixd(&r).unwrap();
        }
        let v = pack_pose(&frame);
        let back = unpack_pose(&v).unwrap();
        assert_eq!(frame, back);
        assert_eq!(back.translation, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn rest_pose_packs_to_canonical_vector() {
        let v = pack_pose(&PoseFrame::rest());
        assert_eq!(&v[..3], &[0.0, 0.0, 0.0]);
        for j in 0..NUM_JOINTS {
            assert_eq!(&v[3 + j * 6..3 + (j + 1) * 6], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn unpack_rejects_wrong_dimension() {
        assert!(unpack_pose(&[0.0; 146]).is_err());
    }
}
