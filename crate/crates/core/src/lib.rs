pub mod data;
pub mod diagnostics;
pub mod estimators;
pub mod gee;
pub mod linalg;
pub mod logit;
pub mod simulation;
pub mod weights;
pub mod wls;
