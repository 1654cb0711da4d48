//! Numerical core for LoRA-adapted 3D box regression.
//!
//! Everything in this crate is pure computation over in-memory values and
//! builds without `std` (only `alloc` is required). File formats, scene
//! ingestion and the command-line front end live in the `lorabox` crate.
//!
//! Module map:
//!
//! * [`geom`] oriented boxes, rigid poses, pinhole projection
//! * [`iou`] rotated 3D IoU, IoU loss and its finite-difference gradient,
//!   plus a Monte-Carlo reference estimator
//! * [`lora`] low-rank adapters (`W' = W + alpha * B A`)
//! * [`model`] the fusion transformer with a 7-DOF regression head
//! * [`loss`] semantic MSE, combined loss and the two-stage schedule
//! * [`optim`] AdamW
//! * [`train`] the epoch loop tying model, losses and schedule together
//! * [`eval`] matching, accuracy / recall / F1, per-sample and per-category mIoU

#![cfg_attr(not(any(feature = "std", test)), no_std)]
#![warn(missing_debug_implementations)]

extern crate alloc;

pub mod eval;
pub mod geom;
pub mod iou;
pub mod lora;
pub mod loss;
pub mod model;
pub mod optim;
pub mod train;

pub use geom::{Box7, CameraIntrinsics, CornerProjection, CornerSet, GeomError, Pose};
pub use iou::{iou_3d, iou_loss, IouError, IouResult};
pub use lora::{LoraAdapter, LoraError, WeightMatrix};

pub use nalgebra;
