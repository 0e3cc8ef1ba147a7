//! Trust-then-inspect robust aggregation for over-the-air federated learning.
//!
//! The crate simulates a federation of MLP clients on a synthetic task, some
//! of which run backdoor attacks, and defends the aggregate with a two-stage
//! pipeline: lightweight client trust scoring and tiering, followed by
//! server-side layer-wise inspection of the ambiguous tier and a
//! reputation filter.

pub mod attacks;
pub mod bo;
pub mod data;
pub mod error;
pub mod inspect;
pub mod io;
pub mod model;
pub mod ota;
pub mod reputation;
pub mod rng;
pub mod sim;
pub mod trust;
pub mod vecops;

pub use attacks::{AttackKind, AttackSpec};
pub use bo::{BoConfig, BoRecord, BoResult};
pub use data::{LabeledDataset, TriggerSpec};
pub use error::{Error, Result};
pub use model::{FlatModel, LayerMap, ModelDims, TrainConfig};
pub use sim::{run_experiment, DefenseMode, RoundRecord, ScenarioConfig};
pub use trust::{Tier, TierSpec, TransformParams, TrustWeights};
