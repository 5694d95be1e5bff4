//! Case-level classification of variable-image mammography exams with
//! two-level multi-instance learning.

pub mod casedata;
pub mod evaluation;
pub mod featurenet;
pub mod milpool;
pub mod model;
pub mod tensor;
pub mod training;
pub mod verify;
