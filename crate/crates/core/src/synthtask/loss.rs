use serde::{Deserialize, Serialize};

use crate::blocks::FeatureMapStack;
use crate::error::{Error, Result};
use crate::reconstruct::mean_squared_error;

/// Decoded joints as `[x, y]` pixel coordinates plus per-joint peak values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    pub joints: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<Vec<f64>>,
}

pub fn heatmap_mse_loss(pred: &FeatureMapStack, gt: &FeatureMapStack) -> Result<f64> {
    mean_squared_error(pred.tensor(), gt.tensor())
}

/// `(1/K) Σ_k ‖j_k − gt_k‖₁` for joints of any (matching) dimension.
pub fn l1_pose_loss<J: AsRef<[f64]>>(j: &[J], gt: &[J]) -> Result<f64> {
    if j.len() != gt.len() {
        return Err(Error::dim(format!("{} joints against {}", j.len(), gt.len())));
    }
    if j.is_empty() {
        return Err(Error::dim("pose loss over zero joints"));
    }
    let mut total = 0.0;
    for (a, b) in j.iter().zip(gt) {
        let (a, b) = (a.as_ref(), b.as_ref());
        if a.len() != b.len() {
            return Err(Error::dim(format!("joint of dimension {} against {}", a.len(), b.len())));
        }
        total += a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
    }
    Ok(total / j.len() as f64)
}

/// Per-map argmax; ties go to the smallest row-major index.
pub fn decode_argmax_pose(x: &FeatureMapStack) -> PoseEstimate {
    let (h, w) = (x.h(), x.w());
    let per = h * w;
    let mut joints = Vec::with_capacity(x.n());
    let mut confidence = Vec::with_capacity(x.n());
    for map in x.tensor().data().chunks_exact(per) {
        let mut best = 0;
        for (i, &v) in map.iter().enumerate().skip(1) {
            if v > map[best] {
                best = i;
            }
        }
        joints.push([(best % w) as f64, (best / w) as f64]);
        confidence.push(map[best]);
    }
    PoseEstimate {
        joints,
        confidence: Some(confidence),
    }
}

/// Mean Euclidean distance in pixels between matching joints.
pub fn mean_joint_error(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::dim(format!("{} joints against {}", pred.len(), gt.len())));
    }
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1]))
        .sum();
    Ok(total / pred.len() as f64)
}
