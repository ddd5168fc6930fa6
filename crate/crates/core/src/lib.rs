//! Teacher–student training where the teacher learns to teach.
//!
//! A student classifier is trained on labeled images (the *textbook pool*)
//! and, through a CKA feature-alignment loss, on auxiliary images whose only
//! annotation is a cup/disc mask. The teacher, which sees image and mask, is
//! updated by differentiating the student's loss on a held-out *quiz pool*
//! through one simulated knowledge-transfer step of the student.

pub mod checkpoint;
pub mod cka;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod models;
pub mod quizpool;
pub mod trainer;

pub use error::{Error, Result};
