//! Network building blocks and the assembled classifier.

pub mod attention;
pub mod linear;
pub mod model;
pub mod sampling;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use attention::{attention_entropy, softmax_rows, EntropyStats};
pub use linear::{binary_linear_forward, BinaryLinear};
pub use model::{BinFlags, Model, ModelConfig, StageConfig};
pub use sampling::{fps, knn, knn_group, CloudPlan};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    /// `N x 3` coordinates
    pub points: Tensor,
    pub label: Option<usize>,
}

impl PointCloud {
    pub fn new(points: Tensor, label: Option<usize>) -> Result<Self> {
        if points.cols() != 3 {
            return Err(Error::ShapeMismatch {
                op: "point cloud",
                expected: "N x 3".into(),
                got: format!("{:?}", points.shape()),
            });
        }
        if let Some(index) = points.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { points, label })
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }
}
