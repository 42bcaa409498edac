//! Periodic gait schedule and swing-foot vertical reference.
//!
//! The schedule is a fixed input to the MPC: per-foot stance/swing flags over
//! continuous time. Foot order matches the contact frame order
//! [FL, FR, RL, RR]. Time zero aligns with the stance start of the
//! left-front / right-rear pair.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GaitSchedule {
    /// Gait period in seconds.
    pub period: f64,
    /// Stance fraction of the period, per foot, in (0, 1].
    pub duty: [f64; 4],
    /// Phase offset of each foot's stance start, as a fraction of the period.
    pub offsets: [f64; 4],
    /// Swing apex height in meters.
    pub step_height: f64,
}

impl GaitSchedule {
    /// Trot: diagonal pairs in phase opposition, duty 0.5.
    pub fn trot(period: f64, step_height: f64) -> Self {
        Self {
            period,
            duty: [0.5; 4],
            offsets: [0.0, 0.5, 0.5, 0.0],
            step_height,
        }
    }

    /// All feet in stance forever.
    pub fn stand() -> Self {
        Self {
            period: 1.0,
            duty: [1.0; 4],
            offsets: [0.0; 4],
            step_height: 0.0,
        }
    }

    fn phase(&self, foot: usize, t: f64) -> f64 {
        let raw = t / self.period - self.offsets[foot];
        raw - raw.floor()
    }

    /// Stance flag for one foot.
    pub fn in_stance(&self, foot: usize, t: f64) -> bool {
        self.duty[foot] >= 1.0 || self.phase(foot, t) < self.duty[foot]
    }

    /// Stance flags for all four feet.
    pub fn contact_flags(&self, t: f64) -> [bool; 4] {
        [
            self.in_stance(0, t),
            self.in_stance(1, t),
            self.in_stance(2, t),
            self.in_stance(3, t),
        ]
    }

    /// Swing progress in [0, 1] if the foot is in swing at `t`.
    pub fn swing_phase(&self, foot: usize, t: f64) -> Option<f64> {
        if self.in_stance(foot, t) {
            return None;
        }
        let duty = self.duty[foot];
        Some((self.phase(foot, t) - duty) / (1.0 - duty))
    }

    /// (liftoff, touchdown) times of the swing window containing `t`.
    pub fn swing_window(&self, foot: usize, t: f64) -> Option<(f64, f64)> {
        let duty = self.duty[foot];
        if self.in_stance(foot, t) {
            return None;
        }
        let phase = self.phase(foot, t);
        let liftoff = t - (phase - duty) * self.period;
        Some((liftoff, liftoff + (1.0 - duty) * self.period))
    }

    /// Swing duration in seconds.
    pub fn swing_duration(&self, foot: usize) -> f64 {
        (1.0 - self.duty[foot]) * self.period
    }

    /// Node stance flag covering touchdown quantization: a swinging foot
    /// whose touchdown falls inside `[a, b)` already counts as stance, so
    /// the plan brings it to rest before the simulator pins it (instead of
    /// dragging a pinned foot until the next node). Liftoff stays pointwise:
    /// planning ground force on an airborne foot would be worse than the
    /// brief hold.
    pub fn stance_at_node(&self, foot: usize, a: f64, b: f64) -> bool {
        if self.in_stance(foot, a) {
            return true;
        }
        match self.swing_window(foot, a) {
            Some((_, touchdown)) => touchdown < b,
            None => true,
        }
    }

    /// Per-node stance flags with touchdown extension over `[a, b)`.
    pub fn contact_flags_interval(&self, a: f64, b: f64) -> [bool; 4] {
        [
            self.stance_at_node(0, a, b),
            self.stance_at_node(1, a, b),
            self.stance_at_node(2, a, b),
            self.stance_at_node(3, a, b),
        ]
    }
}

/// Vertical swing-foot velocity reference at time `t`.
///
/// The height profile is a pair of mirrored cubic Hermite segments rising
/// from 0 to `step_height` at mid-swing and back, with zero velocity at
/// liftoff, apex, and touchdown; its integral over the swing vanishes.
pub fn swing_reference(gait: &GaitSchedule, foot: usize, t: f64, step_height: f64) -> Option<f64> {
    let s = gait.swing_phase(foot, t)?;
    let t_swing = gait.swing_duration(foot);
    Some(swing_vertical_velocity(s, t_swing, step_height))
}

/// Velocity of the swing height profile at progress `s` in [0, 1].
pub fn swing_vertical_velocity(s: f64, t_swing: f64, step_height: f64) -> f64 {
    let (u, sign) = if s <= 0.5 { (2.0 * s, 1.0) } else { (2.0 - 2.0 * s, -1.0) };
    sign * step_height * 6.0 * u * (1.0 - u) * 2.0 / t_swing
}

/// Height of the swing profile at progress `s` (used by tests and metrics).
pub fn swing_height(s: f64, step_height: f64) -> f64 {
    let u = if s <= 0.5 { 2.0 * s } else { 2.0 - 2.0 * s };
    step_height * (3.0 * u * u - 2.0 * u * u * u)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trot_diagonal_pairs() {
        let gait = GaitSchedule::trot(0.8, 0.08);
        let flags = gait.contact_flags(0.0);
        assert_eq!(flags, [true, false, false, true]);
        let flags = gait.contact_flags(0.41);
        assert_eq!(flags, [false, true, true, false]);
    }

    #[test]
    fn flags_are_periodic() {
        let gait = GaitSchedule::trot(0.8, 0.08);
        for i in 0..80 {
            let t = i as f64 * 0.01;
            assert_eq!(gait.contact_flags(t), gait.contact_flags(t + 0.8));
            assert_eq!(gait.contact_flags(t), gait.contact_flags(t + 8.0));
        }
    }

    #[test]
    fn exactly_two_feet_in_stance_for_trot() {
        let gait = GaitSchedule::trot(0.8, 0.08);
        for i in 0..400 {
            let t = 1e-4 + i as f64 * 0.002;
            let n = gait.contact_flags(t).iter().filter(|f| **f).count();
            assert_eq!(n, 2, "at t = {}", t);
        }
    }

    #[test]
    fn stand_never_swings() {
        let gait = GaitSchedule::stand();
        assert_eq!(gait.contact_flags(12.34), [true; 4]);
        assert!(gait.swing_phase(2, 7.7).is_none());
    }

    #[test]
    fn swing_phase_linear_in_time() {
        let gait = GaitSchedule::trot(0.8, 0.08);
        // FL swings during [0.4, 0.8).
        let s1 = gait.swing_phase(0, 0.5).unwrap();
        let s2 = gait.swing_phase(0, 0.7).unwrap();
        assert!((s1 - 0.25).abs() < 1e-12);
        assert!((s2 - 0.75).abs() < 1e-12);
        let (lo, td) = gait.swing_window(0, 0.5).unwrap();
        assert!((lo - 0.4).abs() < 1e-12);
        assert!((td - 0.8).abs() < 1e-12);
    }

    #[test]
    fn swing_apex_velocity_zero() {
        let gait = GaitSchedule::trot(0.8, 0.08);
        let t_apex = 0.4 + 0.2; // FL mid-swing
        let v = swing_reference(&gait, 0, t_apex, 0.08).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn swing_velocity_integrates_to_zero_and_reaches_apex() {
        // Quadrature oracle: integrate v_z over the swing; height must reach
        // step_height at mid-swing and return to zero.
        let t_swing = 0.4;
        let h = 0.08;
        let n = 200_000;
        let dt = t_swing / n as f64;
        let mut z = 0.0;
        let mut z_max = 0.0_f64;
        for i in 0..n {
            let s = (i as f64 + 0.5) / n as f64;
            z += swing_vertical_velocity(s, t_swing, h) * dt;
            z_max = z_max.max(z);
        }
        assert!(z.abs() < 1e-9, "net height {}", z);
        assert!((z_max - h).abs() < 1e-6, "apex {}", z_max);
    }

    #[test]
    fn swing_peak_velocity_matches_hermite_formula() {
        let t_swing = 0.4;
        let h = 0.08;
        // Peak of the rising Hermite segment: 2 h / (T/2) * (3/2) / 2 = 3h/T.
        let expected = 2.0 * h / (t_swing / 2.0) * 1.5 / 2.0;
        let peak = swing_vertical_velocity(0.25, t_swing, h);
        assert!((peak - expected).abs() < 1e-12);
        assert!((peak - 3.0 * h / t_swing).abs() < 1e-12);
    }

    #[test]
    fn stance_query_returns_none() {
        let gait = GaitSchedule::trot(0.8, 0.08);
        assert!(swing_reference(&gait, 0, 0.1, 0.08).is_none());
    }
}
