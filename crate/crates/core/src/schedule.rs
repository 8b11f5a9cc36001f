//! Pruning schedules: how many weights survive at each federated round.
//!
//! The step-wise schedule removes a fixed fraction `p_g` of the remaining
//! weights every `s` rounds. The continuous schedule passes a monotone cubic
//! (Fritsch-Carlson style, harmonic-mean slopes) through the corners
//! `(k * s, (1 - p_g)^k)` of the staircase, so both agree at every knot.

use crate::error::{FedMapError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Stepwise,
    Continuous,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    /// Rounds between prune events.
    pub interval: usize,
    /// Fraction of the remaining weights removed per interval.
    pub prune_fraction: f64,
    /// Lowest fraction of `total_params` ever kept.
    pub floor_fraction: f64,
    /// Prunable parameter count `d`.
    pub total_params: usize,
    /// Number of rounds `T`.
    pub rounds: usize,
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(FedMapError::config("schedule.s", "must be at least 1"));
        }
        if !(self.prune_fraction > 0.0 && self.prune_fraction < 1.0) {
            return Err(FedMapError::config("schedule.p_g", "must lie in (0, 1)"));
        }
        if !(self.floor_fraction > 0.0 && self.floor_fraction <= 1.0) {
            return Err(FedMapError::config("schedule.floor", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Surviving fraction before the floor clamp.
    fn knot(&self, k: u64) -> f64 {
        let k = i32::try_from(k).unwrap_or(i32::MAX);
        (1.0 - self.prune_fraction).powi(k)
    }

    fn raw_fraction(&self, t: usize) -> f64 {
        let s = self.interval as u64;
        let t = t as u64;
        match self.kind {
            ScheduleKind::Stepwise => self.knot(t / s),
            ScheduleKind::Continuous => self.interpolated(t / s, (t % s) as f64 / s as f64),
        }
    }

    /// Hermite cubic on segment `[k*s, (k+1)*s]` at local position `u`.
    fn interpolated(&self, k: u64, u: f64) -> f64 {
        let y0 = self.knot(k);
        if u == 0.0 {
            return y0;
        }
        let y1 = self.knot(k + 1);
        // slopes expressed per unit of u (segment width 1)
        let m0 = self.knot_slope(k);
        let m1 = self.knot_slope(k + 1);
        let u2 = u * u;
        let u3 = u2 * u;
        let h00 = 2.0 * u3 - 3.0 * u2 + 1.0;
        let h10 = u3 - 2.0 * u2 + u;
        let h01 = -2.0 * u3 + 3.0 * u2;
        let h11 = u3 - u2;
        let c = h00 * y0 + h10 * m0 + h01 * y1 + h11 * m1;
        c.clamp(y1, y0)
    }

    fn knot_slope(&self, k: u64) -> f64 {
        let secant = |j: u64| self.knot(j + 1) - self.knot(j);
        if k == 0 {
            // one-sided three-point estimate with the usual monotonicity limits
            let (d0, d1) = (secant(0), secant(1));
            let m = (3.0 * d0 - d1) / 2.0;
            if m.signum() != d0.signum() {
                0.0
            } else if d0.signum() != d1.signum() && m.abs() > 3.0 * d0.abs() {
                3.0 * d0
            } else {
                m
            }
        } else {
            let (a, b) = (secant(k - 1), secant(k));
            if a == 0.0 || b == 0.0 || a.signum() != b.signum() {
                0.0
            } else {
                2.0 / (1.0 / a + 1.0 / b)
            }
        }
    }

    /// `K_t`: surviving weights at round `t` (1-based).
    pub fn remaining_params(&self, t: usize) -> usize {
        let frac = self.raw_fraction(t).max(self.floor_fraction);
        (self.total_params as f64 * frac).round() as usize
    }

    /// The whole series `K_1..=K_T`.
    pub fn series(&self) -> Vec<usize> {
        (1..=self.rounds)
            .map(|t| self.remaining_params(t))
            .collect()
    }

    /// Rounds in `1..=T` where `K_t < K_{t-1}`, taking `K_0 = d`.
    pub fn prune_events(&self) -> Vec<usize> {
        let mut prev = self.total_params;
        let mut events = Vec::new();
        for t in 1..=self.rounds {
            let k = self.remaining_params(t);
            if k < prev {
                events.push(t);
            }
            prev = k;
        }
        events
    }

    /// Surviving count once the floor binds.
    pub fn floor_params(&self) -> usize {
        (self.total_params as f64 * self.floor_fraction).round() as usize
    }
}

/// `(t, K_t)` rows for plotting.
pub fn preview_csv(spec: &ScheduleSpec) -> String {
    let mut out = String::from("t,k_t\n");
    for (i, k) in spec.series().into_iter().enumerate() {
        out.push_str(&format!("{},{k}\n", i + 1));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: ScheduleKind, d: usize, s: usize, floor: f64, rounds: usize) -> ScheduleSpec {
        ScheduleSpec {
            kind,
            interval: s,
            prune_fraction: 0.25,
            floor_fraction: floor,
            total_params: d,
            rounds,
        }
    }

    #[test]
    fn stepwise_reference_values() {
        let sp = spec(ScheduleKind::Stepwise, 10_000, 90, 0.05, 3000);
        assert_eq!(sp.remaining_params(1), 10_000);
        assert_eq!(sp.remaining_params(89), 10_000);
        assert_eq!(sp.remaining_params(90), 7500);
        assert_eq!(sp.remaining_params(180), 5625);
        assert_eq!(sp.remaining_params(2000), 500);
    }

    #[test]
    fn stepwise_events_are_interval_multiples_until_floor() {
        let sp = spec(ScheduleKind::Stepwise, 10_000, 90, 0.05, 3000);
        let ev = sp.prune_events();
        // 0.75^10 = 0.0563 > 0.05 > 0.75^11
        let expected: Vec<usize> = (1..=11).map(|k| 90 * k).collect();
        assert_eq!(ev, expected);
        assert_eq!(sp.remaining_params(990), 500);
        assert_eq!(
            sp.remaining_params(989),
            (10_000.0 * 0.75f64.powi(10)).round() as usize
        );
    }

    #[test]
    fn vanishing_prune_fraction_has_no_events() {
        let mut sp = spec(ScheduleKind::Stepwise, 10_000, 10, 0.05, 200);
        sp.prune_fraction = 1e-12;
        assert!(sp.prune_events().is_empty());
        sp.kind = ScheduleKind::Continuous;
        assert!(sp.prune_events().is_empty());
    }

    #[test]
    fn continuous_matches_knots_and_is_monotone() {
        for &(d, s) in &[(1000usize, 7usize), (10_000, 90), (10_000, 1), (3000, 45)] {
            let st = spec(ScheduleKind::Stepwise, d, s, 0.05, 20 * s);
            let ct = spec(ScheduleKind::Continuous, d, s, 0.05, 20 * s);
            let mut prev = d;
            for t in 1..=20 * s {
                let k = ct.remaining_params(t);
                assert!(k <= prev, "d={d} s={s} t={t}");
                assert!(k >= ct.floor_params());
                prev = k;
                if t % s == 0 {
                    assert_eq!(k, st.remaining_params(t));
                }
            }
        }
    }

    #[test]
    fn continuous_prunes_every_round_until_floor() {
        let ct = spec(ScheduleKind::Continuous, 10_000, 90, 0.05, 1500);
        let ev = ct.prune_events();
        let floor_round = (1..=1500).find(|&t| ct.remaining_params(t) == 500).unwrap();
        assert_eq!(ev, (1..=floor_round).collect::<Vec<_>>());
    }

    #[test]
    fn validation() {
        let mut sp = spec(ScheduleKind::Stepwise, 10, 0, 0.05, 10);
        assert!(sp.validate().is_err());
        sp.interval = 3;
        assert!(sp.validate().is_ok());
        sp.prune_fraction = 1.0;
        assert!(sp.validate().is_err());
        sp.prune_fraction = 0.25;
        sp.floor_fraction = 0.0;
        assert!(sp.validate().is_err());
    }

    #[test]
    fn preview_has_header_and_rows() {
        let sp = spec(ScheduleKind::Stepwise, 100, 2, 0.5, 4);
        assert_eq!(preview_csv(&sp), "t,k_t\n1,100\n2,75\n3,75\n4,56\n");
    }
}
