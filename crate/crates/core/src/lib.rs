//! Simulation, optimization and evaluation of adversarial light signals
//! against rolling-shutter cameras.

pub mod attack;
pub mod camera;
pub mod classifier;
pub mod error;
pub mod eval;
pub mod image;
pub mod optim;
pub mod pwm;
pub mod render;
pub mod rng;
pub mod scene;
pub mod transforms;

pub use attack::{optimize_signal, AttackConfig, AttackResult};
pub use camera::{CameraTimings, LightSignal, ShutterKernel};
pub use classifier::{Classifier, ClassifierOutput, Model};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalReport};
pub use image::Image;
pub use pwm::{compile, PwmSchedule};
pub use render::{Renderer, ScenePair};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
