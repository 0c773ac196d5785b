/// Upper-body skeleton with 21 joints, six rotation values each.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSpec {
    pub names: Vec<&'static str>,
    pub parents: Vec<Option<usize>>,
    pub bone_lengths: Vec<f64>,
    pub shoulders: [usize; 2],
    pub elbows: [usize; 2],
    pub wrists: [usize; 2],
}

pub const JOINTS: usize = 21;
pub const ROT_DIM: usize = 6;
/// Pose values per frame.
pub const POSE_DIM: usize = JOINTS * ROT_DIM;

const TABLE: [(&str, Option<usize>, f64); JOINTS] = [
    ("pelvis", None, 0.0),
    ("spine1", Some(0), 0.10),
    ("spine2", Some(1), 0.12),
    ("spine3", Some(2), 0.12),
    ("neck", Some(3), 0.10),
    ("head", Some(4), 0.12),
    ("jaw", Some(5), 0.08),
    ("left_collar", Some(3), 0.08),
    ("left_shoulder", Some(7), 0.12),
    ("left_elbow", Some(8), 0.26),
    ("left_wrist", Some(9), 0.25),
    ("left_hand", Some(10), 0.08),
    ("left_index", Some(11), 0.04),
    ("left_thumb", Some(11), 0.03),
    ("right_collar", Some(3), 0.08),
    ("right_shoulder", Some(14), 0.12),
    ("right_elbow", Some(15), 0.26),
    ("right_wrist", Some(16), 0.25),
    ("right_hand", Some(17), 0.08),
    ("right_index", Some(18), 0.04),
    ("right_thumb", Some(18), 0.03),
];

impl SkeletonSpec {
    pub fn upper_body() -> Self {
        Self {
            names: TABLE.iter().map(|t| t.0).collect(),
            parents: TABLE.iter().map(|t| t.1).collect(),
            bone_lengths: TABLE.iter().map(|t| t.2).collect(),
            shoulders: [8, 15],
            elbows: [9, 16],
            wrists: [10, 17],
        }
    }

    pub fn joint_count(&self) -> usize {
        self.names.len()
    }

    /// Left-arm joints from the collar down, and their right-arm mirrors.
    pub fn arms(&self) -> ([usize; 7], [usize; 7]) {
        ([7, 8, 9, 10, 11, 12, 13], [14, 15, 16, 17, 18, 19, 20])
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|&n| n == name)
    }

    /// Shoulder, elbow and wrist joints of both arms.
    pub fn beat_joints(&self) -> [usize; 6] {
        [self.shoulders[0], self.shoulders[1], self.elbows[0], self.elbows[1], self.wrists[0], self.wrists[1]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pose_width_matches_encoder_input() {
        let s = SkeletonSpec::upper_body();
        assert_eq!(s.joint_count() * ROT_DIM, 126);
        assert_eq!(POSE_DIM, 126);
        assert_eq!(s.names[s.wrists[1]], "right_wrist");
        assert!(s.parents.iter().enumerate().all(|(i, p)| p.is_none_or(|p| p < i)));
    }
}
