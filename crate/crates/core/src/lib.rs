pub mod error;
pub mod ingest;
pub mod kalman;
pub mod linalg;
pub mod par;
pub mod pca;
pub mod statespace;
pub mod transform;
pub mod validation;
pub mod optim;
pub mod criteria;
pub mod estimation;
pub mod nowcast;
pub mod simulate;
