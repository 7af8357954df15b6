//! Scripted central-pattern-generator gaits.
//!
//! Every gait tracks the same goal space and differs only in its per-leg phase
//! offsets, so a dataset mixing them is multimodal at every goal.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::plant::{PlantParams, NUM_JOINTS};
use crate::{rng, Error, CONTROL_DT, GOAL_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.min, self.max)
    }

    fn sample(&self, r: &mut impl Rng) -> f64 {
        if self.max <= self.min {
            self.min
        } else {
            self.min + (self.max - self.min) * r.gen::<f64>()
        }
    }
}

/// Command ranges for (v_des, h_des, omega_des).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoalRanges {
    pub v_des: Range,
    pub h_des: Range,
    pub omega_des: Range,
}

impl Default for GoalRanges {
    fn default() -> Self {
        Self {
            v_des: Range::new(0.0, 1.0),
            h_des: Range::new(0.2, 0.6),
            omega_des: Range::new(-1.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub v_des: f64,
    pub h_des: f64,
    pub omega_des: f64,
}

impl Goal {
    /// Builds a goal clamped to the default command ranges.
    pub fn new(v_des: f64, h_des: f64, omega_des: f64) -> Self {
        Self::clamped(v_des, h_des, omega_des, &GoalRanges::default())
    }

    pub fn clamped(v_des: f64, h_des: f64, omega_des: f64, ranges: &GoalRanges) -> Self {
        Self {
            v_des: ranges.v_des.clamp(v_des),
            h_des: ranges.h_des.clamp(h_des),
            omega_des: ranges.omega_des.clamp(omega_des),
        }
    }

    pub fn to_array(&self) -> [f64; GOAL_DIM] {
        [self.v_des, self.h_des, self.omega_des]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gait {
    Trot,
    Pace,
    Hop,
    Bound,
}

impl Gait {
    pub const ALL: [Gait; 4] = [Gait::Trot, Gait::Pace, Gait::Hop, Gait::Bound];

    pub fn name(&self) -> &'static str {
        match self {
            Gait::Trot => "trot",
            Gait::Pace => "pace",
            Gait::Hop => "hop",
            Gait::Bound => "bound",
        }
    }

    /// Per-leg phase offsets, legs ordered `[FL, FR, RL, RR]`.
    pub fn phases(&self) -> [f64; NUM_JOINTS] {
        match self {
            Gait::Trot => [0.0, PI, PI, 0.0],
            Gait::Pace => [0.0, PI, 0.0, PI],
            Gait::Hop => [0.0; 4],
            Gait::Bound => [0.0, 0.0, PI, PI],
        }
    }

    pub fn spec(&self) -> GaitSpec {
        GaitSpec {
            gait: *self,
            phases: self.phases(),
        }
    }
}

impl fmt::Display for Gait {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Gait {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Gait::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown gait {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaitSpec {
    pub gait: Gait,
    pub phases: [f64; NUM_JOINTS],
}

/// +1 for left legs (FL, RL), -1 for right legs.
pub const SIDE: [f64; NUM_JOINTS] = [1.0, -1.0, 1.0, -1.0];

pub fn amplitude(v_des: f64) -> f64 {
    0.2 + 0.5 * v_des
}

/// Stepping frequency in Hz.
pub fn frequency(v_des: f64) -> f64 {
    1.5 + 1.0 * v_des
}

/// Joint targets of `gait` at control tick `tick` for `goal`.
///
/// `params` supplies the nominal height model (h0, k_h) used for the bias.
pub fn cpg_action(
    gait: &GaitSpec,
    goal: &Goal,
    tick: u64,
    params: &PlantParams,
) -> [f64; NUM_JOINTS] {
    let t = CONTROL_DT * tick as f64;
    let amp = amplitude(goal.v_des);
    let freq = frequency(goal.v_des);
    let bias = (goal.h_des - params.h0) / params.k_h;
    let turn = 0.1 * goal.omega_des;
    let mut a = [0.0; NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        a[j] = amp * (2.0 * PI * freq * t + gait.phases[j]).sin() + bias + turn * SIDE[j];
    }
    a
}

/// Phase-continuous CPG with a first-order command filter.
///
/// With a constant goal and `filter_tau = 0` this reproduces [`cpg_action`]
/// tick for tick. During collection the filter smooths goal resamples so the
/// lightly damped joints are not kicked by step changes in bias, turn
/// offset or phase.
#[derive(Debug, Clone)]
pub struct CpgOscillator {
    spec: GaitSpec,
    /// Filter time constant in seconds; zero disables filtering.
    pub filter_tau: f64,
    theta: f64,
    command: [f64; GOAL_DIM],
    primed: bool,
}

impl CpgOscillator {
    pub fn new(gait: Gait, filter_tau: f64) -> Self {
        Self {
            spec: gait.spec(),
            filter_tau,
            theta: 0.0,
            command: [0.0; GOAL_DIM],
            primed: false,
        }
    }

    /// Restarts the phase and sets the filtered command to standing still
    /// at nominal height.
    pub fn reset(&mut self, params: &PlantParams) {
        self.theta = 0.0;
        self.command = [0.0, params.h0, 0.0];
        self.primed = self.filter_tau > 0.0;
    }

    /// Sets the oscillator phase (rad) for the next step.
    pub fn set_phase(&mut self, theta: f64) {
        self.theta = theta;
    }

    pub fn filtered_command(&self) -> [f64; GOAL_DIM] {
        self.command
    }

    /// Action for the current tick, then advances the phase by one period.
    pub fn step(&mut self, goal: &Goal, params: &PlantParams) -> [f64; NUM_JOINTS] {
        let target = goal.to_array();
        if self.filter_tau > 0.0 && self.primed {
            let alpha = (CONTROL_DT / self.filter_tau).min(1.0);
            for (c, t) in self.command.iter_mut().zip(target) {
                *c += alpha * (t - *c);
            }
        } else {
            self.command = target;
        }
        let [v, h, omega] = self.command;
        let amp = amplitude(v);
        let bias = (h - params.h0) / params.k_h;
        let turn = 0.1 * omega;
        let mut a = [0.0; NUM_JOINTS];
        for j in 0..NUM_JOINTS {
            a[j] = amp * (self.theta + self.spec.phases[j]).sin() + bias + turn * SIDE[j];
        }
        self.theta += 2.0 * PI * frequency(v) * CONTROL_DT;
        a
    }
}

/// Uniform goal over `ranges`; a collapsed range yields its single value.
pub fn sample_goal(seed: u64, ranges: &GoalRanges) -> Goal {
    let mut r = rng::stream(seed, &[]);
    Goal {
        v_des: ranges.v_des.sample(&mut r),
        h_des: ranges.h_des.sample(&mut r),
        omega_des: ranges.omega_des.sample(&mut r),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nominal() -> PlantParams {
        PlantParams::default()
    }

    #[test]
    fn trot_at_rest_goal_starts_at_zero() {
        let a = cpg_action(&Gait::Trot.spec(), &Goal::new(0.0, 0.3, 0.0), 0, &nominal());
        for v in a {
            assert!(v.abs() < 1e-15, "{a:?}");
        }
    }

    #[test]
    fn hop_moves_all_legs_together() {
        let p = nominal();
        for tick in [0, 3, 17, 250] {
            let a = cpg_action(&Gait::Hop.spec(), &Goal::new(0.7, 0.45, 0.0), tick, &p);
            assert!(a.iter().all(|&v| v == a[0]));
        }
    }

    #[test]
    fn pace_closed_form() {
        // A = 0.45, f = 2.0, delta = 0.02, bias 0, t = 0.26 s.
        let a = cpg_action(&Gait::Pace.spec(), &Goal::new(0.5, 0.3, 0.2), 13, &nominal());
        let x = 2.0 * PI * 2.0 * 0.26;
        let expected = [
            0.45 * x.sin() + 0.02,
            0.45 * (x + PI).sin() - 0.02,
            0.45 * x.sin() + 0.02,
            0.45 * (x + PI).sin() - 0.02,
        ];
        for j in 0..4 {
            assert!((a[j] - expected[j]).abs() < 1e-12, "{a:?} vs {expected:?}");
        }
    }

    #[test]
    fn periodic_when_period_is_integral() {
        // v = 1.0 -> f = 2.5 Hz -> 20 ticks per period.
        let goal = Goal::new(1.0, 0.4, -0.3);
        let p = nominal();
        for gait in Gait::ALL {
            for t in 0..40 {
                let a = cpg_action(&gait.spec(), &goal, t, &p);
                let b = cpg_action(&gait.spec(), &goal, t + 20, &p);
                for j in 0..4 {
                    assert!((a[j] - b[j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn unfiltered_oscillator_matches_closed_form() {
        let p = nominal();
        let goal = Goal::new(0.37, 0.42, -0.6);
        for gait in Gait::ALL {
            let mut osc = CpgOscillator::new(gait, 0.0);
            osc.reset(&p);
            for tick in 0..300 {
                let a = osc.step(&goal, &p);
                let b = cpg_action(&gait.spec(), &goal, tick, &p);
                for j in 0..4 {
                    assert!((a[j] - b[j]).abs() < 1e-9, "{gait} tick {tick}");
                }
            }
        }
    }

    #[test]
    fn filtered_command_converges_from_standing() {
        let p = nominal();
        let mut osc = CpgOscillator::new(Gait::Trot, 1.0);
        osc.reset(&p);
        let goal = Goal::new(1.0, 0.6, 1.0);
        osc.step(&goal, &p);
        let first = osc.filtered_command();
        assert!((first[0] - 0.02).abs() < 1e-12);
        for _ in 0..500 {
            osc.step(&goal, &p);
        }
        let c = osc.filtered_command();
        assert!((c[0] - 1.0).abs() < 1e-3 && (c[1] - 0.6).abs() < 1e-3);
    }

    #[test]
    fn goals_are_clamped() {
        let g = Goal::new(3.0, -1.0, -9.0);
        assert_eq!(g.to_array(), [1.0, 0.2, -1.0]);
    }

    #[test]
    fn goal_sampling() {
        let ranges = GoalRanges::default();
        assert_eq!(sample_goal(11, &ranges), sample_goal(11, &ranges));

        let n = 10_000;
        let mut mean_v = 0.0;
        for s in 0..n {
            let g = sample_goal(s, &ranges);
            assert!((0.0..=1.0).contains(&g.v_des));
            assert!((0.2..=0.6).contains(&g.h_des));
            assert!((-1.0..=1.0).contains(&g.omega_des));
            mean_v += g.v_des / n as f64;
        }
        assert!((mean_v - 0.5).abs() < 0.02, "mean v_des {mean_v}");

        let collapsed = GoalRanges {
            v_des: Range::new(0.5, 0.5),
            h_des: Range::new(0.3, 0.3),
            omega_des: Range::new(0.0, 0.0),
        };
        assert_eq!(sample_goal(1, &collapsed), sample_goal(2, &collapsed));
        assert_eq!(sample_goal(1, &collapsed).to_array(), [0.5, 0.3, 0.0]);
    }

    #[test]
    fn gait_names_round_trip() {
        for g in Gait::ALL {
            assert_eq!(g.name().parse::<Gait>().unwrap(), g);
        }
        assert!("gallop".parse::<Gait>().is_err());
    }
}
