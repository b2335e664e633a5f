pub mod autodiff;
pub mod config;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod loss;
pub mod seq2seq;
pub mod so3;
pub mod trainer;

pub use config::{DataConfig, Profile, RunConfig};
pub use dynamics::{ControlInput, LoadAngularVelocity, PhysicalParams, SystemState};
pub use error::{Error, Result};
pub use eval::{MaeCurve, PhysicsBaseline, Predictor, RmseRow};
pub use experiment::{RunManifest, Variant};
pub use loss::{LossBreakdown, LossWeights};
pub use seq2seq::{Model, ModelConfig};
pub use so3::{UnitQuat, Vec3};
pub use trainer::{TrainConfig, TrainReport};
