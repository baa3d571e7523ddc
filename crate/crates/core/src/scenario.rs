//! Mock displacement scenarios for simulated devices.
//!
//! Kinematic scenarios prescribe per-column angles and push them through
//! [`forward_column`] down each chain, so every generated displacement is
//! exactly solvable and the prescribed angles serve as ground truth.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::kinematics::{forward_column, Point3};
use crate::model::RuntimeConfig;

/// `amplitude · sin(2π · frequency_hz · t + phase)`, radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Harmonic {
    pub amplitude: f64,
    pub frequency_hz: f64,
    #[serde(default)]
    pub phase: f64,
}

impl Harmonic {
    pub const ZERO: Harmonic = Harmonic { amplitude: 0.0, frequency_hz: 1.0, phase: 0.0 };

    pub fn at(&self, t_s: f64) -> f64 {
        self.amplitude * libm::sin(2.0 * PI * self.frequency_hz * t_s + self.phase)
    }
}

/// Angle trajectories of one column.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnMotion {
    pub r_y: Harmonic,
    pub t_x: Harmonic,
}

/// Constant angles of one column, radians.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ColumnAngles {
    pub r_y: f64,
    pub t_x: f64,
}

/// One recorded row of a replay file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayRow {
    pub node_id: String,
    pub t_s: f64,
    pub dx_m: f64,
    pub dy_m: f64,
    pub dz_m: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Scenario {
    /// Sinusoidal sway; columns without an override use `default`.
    Harmonic {
        default: ColumnMotion,
        #[serde(default)]
        per_column: BTreeMap<String, ColumnMotion>,
    },
    /// Rest until `step_time_s`, constant angles from then on.
    Step {
        step_time_s: f64,
        default: ColumnAngles,
        #[serde(default)]
        per_column: BTreeMap<String, ColumnAngles>,
    },
    /// Recorded displacements per node; the newest row at or before `t` is
    /// emitted.
    Replay { rows: Vec<ReplayRow> },
    /// Fixed displacements per node (meters), emitted verbatim.
    Raw { displacements: BTreeMap<String, Point3> },
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum ScenarioError {
    #[error("node {0:?} is not part of the structure")]
    UnknownNode(String),
    #[error("replay has no rows for node {node_id:?} at or after t = {t_s} s")]
    ReplayExhausted { node_id: String, t_s: f64 },
    #[error("invalid scenario: {0}")]
    Invalid(&'static str),
}

impl Scenario {
    /// Uniform harmonic sway of every column about y, with `t_x` at half
    /// amplitude and a quarter period behind.
    pub fn harmonic(amplitude: f64, frequency_hz: f64) -> Scenario {
        Scenario::Harmonic {
            default: ColumnMotion {
                r_y: Harmonic { amplitude, frequency_hz, phase: 0.0 },
                t_x: Harmonic { amplitude: amplitude / 2.0, frequency_hz, phase: -FRAC_PI_2 },
            },
            per_column: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let check_harmonic = |h: &Harmonic| {
            if h.amplitude.is_nan() || libm::fabs(h.amplitude) >= FRAC_PI_2 {
                return Err(ScenarioError::Invalid("harmonic amplitude must be below pi/2"));
            }
            if h.frequency_hz.is_nan() || h.frequency_hz <= 0.0 || !h.frequency_hz.is_finite() || !h.phase.is_finite() {
                return Err(ScenarioError::Invalid("harmonic frequency must be positive"));
            }
            Ok(())
        };
        let check_angles = |a: &ColumnAngles| {
            if libm::fabs(a.r_y) < FRAC_PI_2 && libm::fabs(a.t_x) < FRAC_PI_2 {
                Ok(())
            } else {
                Err(ScenarioError::Invalid("step angles must be below pi/2"))
            }
        };
        match self {
            Scenario::Harmonic { default, per_column } => {
                for m in core::iter::once(default).chain(per_column.values()) {
                    check_harmonic(&m.r_y)?;
                    check_harmonic(&m.t_x)?;
                }
            }
            Scenario::Step { step_time_s, default, per_column } => {
                if !step_time_s.is_finite() {
                    return Err(ScenarioError::Invalid("step time must be finite"));
                }
                for a in core::iter::once(default).chain(per_column.values()) {
                    check_angles(a)?;
                }
            }
            Scenario::Replay { rows } => {
                let finite = rows.iter().all(|r| {
                    r.t_s.is_finite() && r.dx_m.is_finite() && r.dy_m.is_finite() && r.dz_m.is_finite()
                });
                if !finite {
                    return Err(ScenarioError::Invalid("replay rows must be finite"));
                }
            }
            Scenario::Raw { displacements } => {
                if !displacements.values().all(Point3::is_finite) {
                    return Err(ScenarioError::Invalid("raw displacements must be finite"));
                }
            }
        }
        Ok(())
    }

    pub fn is_kinematic(&self) -> bool {
        matches!(self, Scenario::Harmonic { .. } | Scenario::Step { .. })
    }

    /// Prescribed angles of a column at `t_s`; `None` for non-kinematic
    /// scenarios.
    pub fn column_angles(&self, column_id: &str, t_s: f64) -> Option<ColumnAngles> {
        match self {
            Scenario::Harmonic { default, per_column } => {
                let m = per_column.get(column_id).unwrap_or(default);
                Some(ColumnAngles { r_y: m.r_y.at(t_s), t_x: m.t_x.at(t_s) })
            }
            Scenario::Step { step_time_s, default, per_column } => Some(if t_s < *step_time_s {
                ColumnAngles::default()
            } else {
                *per_column.get(column_id).unwrap_or(default)
            }),
            _ => None,
        }
    }
}

/// Displacement (meters) the scenario prescribes for `node_id` at `t_s`.
pub fn scenario_sample(
    scenario: &Scenario,
    config: &RuntimeConfig,
    node_id: &str,
    t_s: f64,
) -> Result<Point3, ScenarioError> {
    let node = config
        .node(node_id)
        .ok_or_else(|| ScenarioError::UnknownNode(node_id.into()))?;
    match scenario {
        Scenario::Raw { displacements } => Ok(displacements.get(node_id).copied().unwrap_or(Point3::ZERO)),
        Scenario::Replay { rows } => {
            let mut best: Option<&ReplayRow> = None;
            let mut any_later = false;
            for row in rows.iter().filter(|r| r.node_id == node_id) {
                if row.t_s <= t_s {
                    if best.is_none_or(|b| row.t_s >= b.t_s) {
                        best = Some(row);
                    }
                } else {
                    any_later = true;
                }
            }
            match best {
                Some(row) if any_later || row.t_s == t_s => Ok(Point3::new(row.dx_m, row.dy_m, row.dz_m)),
                _ => Err(ScenarioError::ReplayExhausted { node_id: node_id.into(), t_s }),
            }
        }
        Scenario::Harmonic { .. } | Scenario::Step { .. } => {
            if node.is_ground {
                return Ok(Point3::ZERO);
            }
            let primed = kinematic_positions(scenario, config, t_s)
                .remove(node_id)
                .ok_or_else(|| ScenarioError::UnknownNode(node_id.into()))?;
            Ok((primed - node.rest_position) * (1.0 / config.scale_factor))
        }
    }
}

/// Deformed positions (model units) of every chained node under a kinematic
/// scenario, ground nodes held at rest.
pub fn kinematic_positions(scenario: &Scenario, config: &RuntimeConfig, t_s: f64) -> BTreeMap<String, Point3> {
    let mut out = BTreeMap::new();
    for chain in &config.chains {
        let mut bottom = chain.columns[0].geometry.rest_bottom();
        out.insert(chain.base_node_id.clone(), bottom);
        for column in &chain.columns {
            let angles = scenario.column_angles(&column.column_id, t_s).unwrap_or_default();
            bottom = forward_column(bottom, &column.geometry, angles.r_y, angles.t_x);
            out.insert(column.top_node_id.clone(), bottom);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::two_level_frame;
    use alloc::vec;

    fn config() -> RuntimeConfig {
        RuntimeConfig::resolve(&two_level_frame("s1", 4.0, 3.0, 3.0), &[], None, 1).unwrap()
    }

    #[test]
    fn harmonic_peak_matches_closed_form() {
        let s = Scenario::harmonic(0.1, 1.0);
        let d = scenario_sample(&s, &config(), "L1-N1", 0.25).unwrap();
        assert!((d.x - 3.0 * libm::sin(0.1)).abs() < 1e-12);
        assert!((d.x - 0.2995002).abs() < 1e-7);
    }

    #[test]
    fn harmonic_starts_at_rest() {
        let s = Scenario::Harmonic {
            default: ColumnMotion {
                r_y: Harmonic { amplitude: 0.1, frequency_hz: 1.0, phase: 0.0 },
                t_x: Harmonic { amplitude: 0.05, frequency_hz: 2.0, phase: 0.0 },
            },
            per_column: BTreeMap::new(),
        };
        for node in ["L1-N1", "L2-N3", "G-N2"] {
            assert_eq!(scenario_sample(&s, &config(), node, 0.0).unwrap(), Point3::ZERO);
        }
    }

    #[test]
    fn step_scenario() {
        let s = Scenario::Step {
            step_time_s: 1.0,
            default: ColumnAngles { r_y: 0.05, t_x: 0.02 },
            per_column: BTreeMap::new(),
        };
        let cfg = config();
        assert_eq!(scenario_sample(&s, &cfg, "L2-N1", 0.5).unwrap(), Point3::ZERO);
        let a = scenario_sample(&s, &cfg, "L2-N1", 1.0).unwrap();
        let b = scenario_sample(&s, &cfg, "L2-N1", 7.0).unwrap();
        assert_eq!(a, b);
        assert!((a.x - 6.0 * libm::sin(0.05)).abs() < 1e-12);
    }

    #[test]
    fn replay_and_raw() {
        let cfg = config();
        let replay = Scenario::Replay {
            rows: vec![
                ReplayRow { node_id: "L1-N1".into(), t_s: 0.0, dx_m: 0.1, dy_m: 0.0, dz_m: 0.0 },
                ReplayRow { node_id: "L1-N1".into(), t_s: 1.0, dx_m: 0.2, dy_m: 0.0, dz_m: 0.0 },
            ],
        };
        assert_eq!(scenario_sample(&replay, &cfg, "L1-N1", 0.5).unwrap().x, 0.1);
        assert_eq!(scenario_sample(&replay, &cfg, "L1-N1", 1.0).unwrap().x, 0.2);
        assert!(matches!(
            scenario_sample(&replay, &cfg, "L1-N1", 1.5),
            Err(ScenarioError::ReplayExhausted { .. })
        ));

        let mut displacements = BTreeMap::new();
        displacements.insert("L1-N2".into(), Point3::new(9.0, 0.0, 0.0));
        let raw = Scenario::Raw { displacements };
        assert_eq!(scenario_sample(&raw, &cfg, "L1-N2", 3.0).unwrap(), Point3::new(9.0, 0.0, 0.0));
        assert!(matches!(
            scenario_sample(&raw, &cfg, "nope", 0.0),
            Err(ScenarioError::UnknownNode(_))
        ));
    }

    #[test]
    fn validation() {
        assert!(Scenario::harmonic(0.1, 1.0).validate().is_ok());
        assert!(Scenario::harmonic(2.0, 1.0).validate().is_err());
        assert!(Scenario::harmonic(0.1, 0.0).validate().is_err());
    }
}
