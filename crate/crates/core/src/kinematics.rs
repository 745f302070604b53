//! Kinematic bicycle model of the simulated car, generic over the float type.

use std::fmt::Debug;

use num_traits::{Float, FloatConst};
use serde::{Deserialize, Serialize};

use crate::command::CommandKind;

/// Floating-point types the simulation runs on (`f32`, `f64`).
pub trait Scalar: Float + FloatConst + Debug + Default + Send + Sync + 'static {
    fn lit(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite literal")
    }
}

impl<T> Scalar for T where T: Float + FloatConst + Debug + Default + Send + Sync + 'static {}

pub const MAX_STEERING_DEG: f64 = 30.0;
pub const DEFAULT_WHEELBASE_M: f64 = 0.25;
pub const DEFAULT_MAX_SPEED_MPS: f64 = 0.5;

/// Car pose and control state. Angles are radians, distances meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseState<T> {
    pub x: T,
    pub y: T,
    pub heading: T,
    pub speed: T,
    pub steering: T,
    pub cam_pan: T,
    pub cam_tilt: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams<T> {
    pub wheelbase: T,
    /// Speed reached at `SET_SPEED 100`, m/s.
    pub max_speed: T,
}

impl<T: Scalar> Default for VehicleParams<T> {
    fn default() -> Self {
        VehicleParams {
            wheelbase: T::lit(DEFAULT_WHEELBASE_M),
            max_speed: T::lit(DEFAULT_MAX_SPEED_MPS),
        }
    }
}

impl<T: Scalar> PoseState<T> {
    pub fn origin() -> Self {
        Self::default()
    }

    /// Sets control fields from a (clamped) command.
    pub fn apply_command(&mut self, cmd: CommandKind, params: &VehicleParams<T>) {
        let deg = |v: i32| T::lit(v as f64).to_radians();
        match cmd.clamped() {
            CommandKind::SetSpeed(p) => {
                self.speed = T::lit(p as f64) / T::lit(100.0) * params.max_speed
            }
            CommandKind::SetSteering(d) => self.steering = deg(d),
            CommandKind::SetCamPan(d) => self.cam_pan = deg(d),
            CommandKind::SetCamTilt(d) => self.cam_tilt = deg(d),
            CommandKind::Stop => {
                self.speed = T::zero();
                self.steering = T::zero();
            }
        }
    }
}

/// One forward-Euler step of the bicycle model.
pub fn step_kinematics<T: Scalar>(state: &PoseState<T>, dt: T, wheelbase: T) -> PoseState<T> {
    let mut next = *state;
    next.x = state.x + state.speed * state.heading.cos() * dt;
    next.y = state.y + state.speed * state.heading.sin() * dt;
    next.heading = state.heading + (state.speed / wheelbase) * state.steering.tan() * dt;
    next
}

/// Frame-stepped simulation: commands for a frame are applied, then the
/// pose advances by one frame interval. The resulting pose is what that
/// frame renders. The device agent and the container verifier share this
/// so their arithmetic is identical.
#[derive(Debug, Clone)]
pub struct Simulator<T> {
    pose: PoseState<T>,
    params: VehicleParams<T>,
    dt: T,
}

impl<T: Scalar> Simulator<T> {
    pub fn new(params: VehicleParams<T>, fps: u8) -> Self {
        Simulator {
            pose: PoseState::origin(),
            params,
            dt: T::one() / T::lit(fps as f64),
        }
    }

    pub fn pose(&self) -> &PoseState<T> {
        &self.pose
    }

    pub fn params(&self) -> &VehicleParams<T> {
        &self.params
    }

    pub fn tick<I>(&mut self, commands: I) -> &PoseState<T>
    where
        I: IntoIterator<Item = CommandKind>,
    {
        for cmd in commands {
            self.pose.apply_command(cmd, &self.params);
        }
        self.pose = step_kinematics(&self.pose, self.dt, self.params.wheelbase);
        &self.pose
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_speed_stays_put() {
        let s = PoseState::<f64> {
            steering: 0.3,
            heading: 1.0,
            ..Default::default()
        };
        let n = step_kinematics(&s, 1.0, 0.25);
        assert_eq!((n.x, n.y, n.heading), (0.0, 0.0, 1.0));
    }

    #[test]
    fn straight_line() {
        let s = PoseState::<f64> {
            speed: 0.5,
            ..Default::default()
        };
        let n = step_kinematics(&s, 1.0, 0.25);
        assert_eq!((n.x, n.y, n.heading), (0.5, 0.0, 0.0));
    }

    #[test]
    fn turning_rate() {
        // (0.5 / 0.25) * tan(30°) = 2 / sqrt(3)
        let expected = 2.0 / 3f64.sqrt();
        assert!((expected - 1.154_701).abs() < 1e-6);
        let s = PoseState::<f64> {
            speed: 0.5,
            steering: 30f64.to_radians(),
            ..Default::default()
        };
        let n = step_kinematics(&s, 1.0, 0.25);
        assert!((n.heading - expected).abs() < 1e-12);
        let s32 = PoseState::<f32> {
            speed: 0.5,
            steering: 30f32.to_radians(),
            ..Default::default()
        };
        assert!((step_kinematics(&s32, 1.0, 0.25).heading - expected as f32).abs() < 1e-5);
    }

    #[test]
    fn commands_map_to_controls() {
        let p = VehicleParams::<f64>::default();
        let mut s = PoseState::origin();
        s.apply_command(CommandKind::SetSpeed(50), &p);
        assert_eq!(s.speed, 0.25);
        s.apply_command(CommandKind::SetSteering(45), &p);
        assert_eq!(s.steering, 30f64.to_radians());
        s.apply_command(CommandKind::SetCamTilt(70), &p);
        assert_eq!(s.cam_tilt, 65f64.to_radians());
        s.apply_command(CommandKind::Stop, &p);
        assert_eq!((s.speed, s.steering), (0.0, 0.0));
        assert_eq!(s.cam_tilt, 65f64.to_radians());
    }

    #[test]
    fn simulator_applies_before_stepping() {
        let mut sim = Simulator::<f64>::new(VehicleParams::default(), 30);
        assert_eq!(sim.tick([]).x, 0.0);
        let x = sim.tick([CommandKind::SetSpeed(100)]).x;
        assert!((x - 0.5 / 30.0).abs() < 1e-15);
    }
}
