use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{evaluate, seeds_summary, EvalError, PolicyController};
use crate::adapter::{PriorSpec, PromptSpec};
use crate::bfm::Checkpoint;
use crate::ppo::{train, TrainSetup};

/// One value of the prior axis: a label and the prompt trained with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorAxis {
    pub name: String,
    pub prompt: PromptSpec,
}

/// Full factorial over encoder width × current-pose input × prior tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSpec {
    pub hidden: Vec<Vec<usize>>,
    pub use_current_pose: Vec<bool>,
    pub priors: Vec<PriorAxis>,
    /// Training seeds; every cell uses the same ones.
    pub seeds: Vec<u64>,
    pub episodes: usize,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            hidden: vec![vec![512, 512, 512], vec![256, 256]],
            use_current_pose: vec![true, false],
            priors: vec![
                PriorAxis {
                    name: "facing".into(),
                    prompt: PromptSpec::new(vec![PriorSpec::facing()]),
                },
                PriorAxis {
                    name: "none".into(),
                    prompt: PromptSpec::default(),
                },
            ],
            seeds: vec![0, 1, 2, 3, 4],
            episodes: 256,
        }
    }
}

impl AblationSpec {
    pub fn cells(&self) -> usize {
        self.hidden.len() * self.use_current_pose.len() * self.priors.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// Hidden widths joined by `x`, e.g. `512x512x512`.
    pub encoder_hidden: String,
    pub use_current_pose: bool,
    pub prior: String,
    pub seeds: usize,
    pub mean: f64,
    pub std: f64,
}

/// Trains and evaluates every cell with `base`'s PPO settings and seeds.
/// Cells run sequentially in declaration order.
pub fn ablation_run(
    spec: &AblationSpec,
    base: &TrainSetup,
    bfm: &Checkpoint,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<AblationRow>, EvalError> {
    if spec.cells() == 0 || spec.seeds.is_empty() || spec.episodes == 0 {
        return Err(EvalError::Config(
            "ablation needs non-empty axes, seeds and episodes".into(),
        ));
    }
    let mut rows = Vec::with_capacity(spec.cells());
    for hidden in &spec.hidden {
        for &pose in &spec.use_current_pose {
            for prior in &spec.priors {
                let mut rates = Vec::with_capacity(spec.seeds.len());
                for &seed in &spec.seeds {
                    let mut setup = base.clone();
                    setup.seed = seed;
                    setup.policy.encoder.hidden = hidden.clone();
                    setup.policy.encoder.use_current_pose = pose;
                    setup.policy.prompt = prior.prompt.clone();
                    let outcome = train(&setup, Some(bfm), None, None).map_err(Box::new)?;
                    let run = evaluate(
                        &mut PolicyController::new(&outcome.policy),
                        &setup.eval_setup(),
                        spec.episodes,
                        seed,
                    )?;
                    rates.push(run.success_rate());
                }
                let (mean, std) = seeds_summary(&rates)?;
                let row = AblationRow {
                    encoder_hidden: hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join("x"),
                    use_current_pose: pose,
                    prior: prior.name.clone(),
                    seeds: rates.len(),
                    mean,
                    std,
                };
                if let Some(w) = log.as_deref_mut() {
                    writeln!(
                        w,
                        "[{}] pose={} prior={}: {:.2} ± {:.2}",
                        row.encoder_hidden, row.use_current_pose, row.prior, row.mean, row.std
                    )?;
                }
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

pub fn write_ablation_csv(rows: &[AblationRow], out: impl Write) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ablation_csv(input: impl Read) -> Result<Vec<AblationRow>, EvalError> {
    Ok(csv::Reader::from_reader(input)
        .deserialize()
        .collect::<Result<_, _>>()?)
}
