//! Driving policies evaluated by the closed-loop benchmark: the trained
//! stack in online planning mode, plus the reference baselines.

use crate::control::{waypoints_to_controls, ControlCommand, PidState};
use crate::lm::{PlanOutput, SequenceContext};
use crate::microworld::episode::DrivingPolicy;
use crate::microworld::expert::ScriptedInstruction;
use crate::microworld::render::MultiViewFrame;
use crate::microworld::world::WorldState;
use crate::nn::no_grad;
use crate::training::DrivingStack;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Online planning mode: vision -> Q-Former -> causal LM -> waypoints -> PID.
/// The diffusion generator is never invoked on this path.
pub struct ModelAgent<'a> {
    stack: &'a DrivingStack,
    ctx: SequenceContext,
    pid: PidState,
}

impl<'a> ModelAgent<'a> {
    pub fn new(stack: &'a DrivingStack) -> ModelAgent<'a> {
        ModelAgent {
            ctx: SequenceContext::new(stack.cfg.lm.t_max),
            pid: PidState::new(stack.cfg.control.clone()),
            stack,
        }
    }

    /// One planning step from a rendered frame (shared with offline rollout).
    pub fn plan_step(&mut self, frame: &MultiViewFrame, instruction_text: &str) -> PlanOutput {
        no_grad(|| {
            let tokens = self.stack.vision.forward(frame);
            let feat = self.stack.planner.compress_frame(&tokens);
            self.ctx
                .set_instruction(self.stack.planner.tokenize_instruction(instruction_text));
            self.ctx.push_frame(feat);
            let (plan, _world, _) = self
                .stack
                .planner
                .plan(&self.ctx, self.stack.opts.action_queries)
                .expect("context fits");
            plan
        })
    }

    /// Planner world embedding for the current context (offline mode only).
    pub fn world_embedding(&self) -> Option<crate::lm::WorldEmbedding> {
        no_grad(|| {
            let (_, world) = self.stack.planner.forward_lm(&self.ctx).expect("context fits");
            world.map(|vectors| crate::lm::WorldEmbedding { vectors })
        })
    }
}

impl DrivingPolicy for ModelAgent<'_> {
    fn reset(&mut self) {
        self.ctx.clear_frames();
        self.pid.reset();
    }

    fn act(
        &mut self,
        state: &WorldState,
        frame: &MultiViewFrame,
        instruction: &ScriptedInstruction,
    ) -> (ControlCommand, f64) {
        let plan = self.plan_step(frame, &instruction.instruction.text);
        let dt = self.stack.cfg.microworld.dt;
        let (control, next_pid) = waypoints_to_controls(&plan, state.ego_speed, &self.pid, dt);
        self.pid = next_pid;
        self.ctx.prev_control = control;
        (control, plan.completed)
    }
}

/// Baseline: fixed throttle, no steering, never signals completion.
pub struct ConstantThrottleAgent {
    pub throttle: f64,
}

impl DrivingPolicy for ConstantThrottleAgent {
    fn reset(&mut self) {}

    fn act(
        &mut self,
        _state: &WorldState,
        _frame: &MultiViewFrame,
        _instruction: &ScriptedInstruction,
    ) -> (ControlCommand, f64) {
        (
            ControlCommand {
                throttle: self.throttle,
                brake: 0.0,
                steer: 0.0,
            },
            0.0,
        )
    }
}

/// Baseline: random waypoints through the same PID stack as the model.
pub struct RandomWaypointAgent {
    rng: ChaCha12Rng,
    pid: PidState,
    cfg: crate::config::ControlConfig,
    dt: f64,
}

impl RandomWaypointAgent {
    pub fn new(cfg: &crate::config::RunConfig, seed: u64) -> RandomWaypointAgent {
        RandomWaypointAgent {
            rng: crate::rng::derive_rng(seed, "random-waypoint-agent"),
            pid: PidState::new(cfg.control.clone()),
            cfg: cfg.control.clone(),
            dt: cfg.microworld.dt,
        }
    }
}

impl DrivingPolicy for RandomWaypointAgent {
    fn reset(&mut self) {
        self.pid = PidState::new(self.cfg.clone());
    }

    fn act(
        &mut self,
        state: &WorldState,
        _frame: &MultiViewFrame,
        _instruction: &ScriptedInstruction,
    ) -> (ControlCommand, f64) {
        let mut wps = [[0.0; 2]; 4];
        let mut x = 0.0;
        for wp in &mut wps {
            x += self.rng.gen_range(0.0..1.4);
            *wp = [x, self.rng.gen_range(-1.5..1.5)];
        }
        let plan = PlanOutput {
            waypoints: wps,
            completed: 0.0,
        };
        let (control, next_pid) = waypoints_to_controls(&plan, state.ego_speed, &self.pid, self.dt);
        self.pid = next_pid;
        (control, 0.0)
    }
}
