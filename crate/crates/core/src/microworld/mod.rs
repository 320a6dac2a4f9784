//! Self-contained 2D top-down driving environment: road network, ego
//! kinematics, scripted agents, traffic lights, multi-view rasterized
//! cameras, expert demonstrations, and infraction detection.

pub mod episode;
pub mod expert;
pub mod geometry;
pub mod infractions;
pub mod instructions;
pub mod render;
pub mod scenario;
pub mod world;

pub use episode::{run_episode, DrivingPolicy, EpisodeLog, EpisodeOptions, ExpertPolicy};
pub use expert::{expert_control, expert_policy, expert_waypoints, ScriptedInstruction};
pub use geometry::{Polyline, Pose, Vec2};
pub use infractions::{detect_infractions, InfractionEvent, InfractionKind};
pub use instructions::{Instruction, InstructionKind, Vocabulary};
pub use render::{render_views, Image, MultiViewFrame};
pub use scenario::{generate_scenario, Scenario, ScenarioGenOptions};
pub use world::{step_dynamics, LightState, WorldDef, WorldState};
