use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{evaluate, seeds_summary, Controller, EvalError, EvalSetup};
use crate::sim::{apply_perturbation, TaskKind};

/// Friction and gravity multipliers, each swept with the other held at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub friction: Vec<f64>,
    pub gravity: Vec<f64>,
    pub task: TaskKind,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            friction: vec![0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6],
            gravity: vec![0.5, 0.75, 1.0, 1.25, 1.5],
            task: TaskKind::Steering,
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<(), EvalError> {
        for (name, axis) in [("friction", &self.friction), ("gravity", &self.gravity)] {
            if !axis.contains(&1.0) {
                return Err(EvalError::Config(format!("{name} grid must contain the nominal 1.0")));
            }
            if axis.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
                return Err(EvalError::Config(format!(
                    "{name} multipliers must be positive and finite"
                )));
            }
        }
        Ok(())
    }

    /// `(axis, friction, gravity)` grid points; the nominal point appears once.
    pub fn points(&self) -> Vec<(&'static str, f64, f64)> {
        let mut pts: Vec<_> = self
            .friction
            .iter()
            .map(|&f| (if f == 1.0 { "nominal" } else { "friction" }, f, 1.0))
            .collect();
        pts.extend(self.gravity.iter().filter(|&&g| g != 1.0).map(|&g| ("gravity", 1.0, g)));
        pts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub friction: f64,
    pub gravity: f64,
    pub seeds: usize,
    pub mean: f64,
    pub std: f64,
}

/// Evaluates the same controller at every grid point. Nothing is trained and
/// nothing is written.
pub fn ood_sweep(
    controller: &mut dyn Controller,
    grid: &SweepGrid,
    base: &EvalSetup,
    episodes: usize,
    seeds: &[u64],
) -> Result<Vec<SweepRow>, EvalError> {
    grid.validate()?;
    grid.points()
        .into_iter()
        .map(|(axis, f, g)| {
            let setup = EvalSetup {
                task: grid.task,
                params: apply_perturbation(&base.params, f, g)?,
                env: base.env.clone(),
            };
            let rates = seeds
                .iter()
                .map(|&s| evaluate(controller, &setup, episodes, s).map(|r| r.success_rate()))
                .collect::<Result<Vec<_>, _>>()?;
            let (mean, std) = seeds_summary(&rates)?;
            Ok(SweepRow {
                axis: axis.into(),
                friction: f,
                gravity: g,
                seeds: seeds.len(),
                mean,
                std,
            })
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], out: impl Write) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv(input: impl Read) -> Result<Vec<SweepRow>, EvalError> {
    Ok(csv::Reader::from_reader(input)
        .deserialize()
        .collect::<Result<_, _>>()?)
}
