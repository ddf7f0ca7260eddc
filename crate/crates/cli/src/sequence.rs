//! Frame sequences with known camera rotations.
//!
//! ```json
//! {"frames": [{"image": "frame_0000.png", "rotation": [0, 0, 0]}, ...]}
//! ```
//!
//! `rotation` is the camera-to-world rotation of the frame as an axis-angle
//! vector. Relative image paths are resolved against the file's directory.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use semtex::warp::so3_log;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub image: PathBuf,
    pub rotation: [f64; 3],
}

impl Frame {
    pub fn new(image: PathBuf, r: &Matrix3<f64>) -> Self {
        let w = so3_log(r);
        Self {
            image,
            rotation: [w.x, w.y, w.z],
        }
    }

    pub fn rotation_vector(&self) -> Vector3<f64> {
        Vector3::from(self.rotation)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub frames: Vec<Frame>,
}

impl Sequence {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut seq: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for f in &mut seq.frames {
            if f.image.is_relative() {
                f.image = base.join(&f.image);
            }
        }
        Ok(seq)
    }
}
