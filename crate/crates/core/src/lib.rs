//! Bone-length-aware 3D human pose estimation.
//!
//! A pose is split into bone lengths and unit bone directions. A recurrent
//! model estimates a subject's bone lengths from a 2D keypoint sequence, and
//! the lengths replace those of any lifter's 3D prediction while keeping its
//! directions.
//!
//! ```
//! use blapose::skeleton::{decompose_pose, reconstruct_pose, Pose, SkeletonTopology, Vec3};
//!
//! let topo = SkeletonTopology::h36m17();
//! let joints: Vec<Vec3> = (0..17).map(|j| Vec3::new(0.1 * j as f64, -0.05 * j as f64, 5.0)).collect();
//! let pose = Pose::new(joints).unwrap();
//! let (lengths, dirs) = decompose_pose(&pose, &topo).unwrap();
//! let back = reconstruct_pose(&lengths, &dirs, pose.root(), &topo).unwrap();
//! assert!((back.joints()[16] - pose.joints()[16]).norm() < 1e-9);
//! ```

pub mod augment;
pub mod bench;
pub mod camera;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod plot;
pub mod rng;
pub mod skeleton;

pub use error::{Error, Result};

// Compiles and runs the guide's code blocks as doc tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/skeleton.md")]
    mod skeleton {}
    #[doc = include_str!("../../../book/src/camera.md")]
    mod camera {}
    #[doc = include_str!("../../../book/src/augmentation.md")]
    mod augmentation {}
    #[doc = include_str!("../../../book/src/length-model.md")]
    mod length_model {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
