//! Staged joint optimisation of all persons in a scene.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::body_model::{BodyModel, ParamBlock, PersonState};
use crate::camera::Intrinsics;
use crate::cues::PersonCues;
use crate::losses::{LossBreakdown, LossWeights, SceneObjective};
use crate::optim::{Adam, AdamConfig, LearningRates};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub name: String,
    pub free_params: Vec<ParamBlock>,
    pub iterations: usize,
    pub weights: LossWeights,
    pub learning_rates: LearningRates,
}

/// Which state the init regulariser pulls toward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrevStateRefresh {
    /// The state at the start of the current stage.
    StageStart,
    /// The initial states for every stage.
    Initial,
}

/// How shape is initialised before the first stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaInit {
    /// Use the shape of the initial states as given.
    Keep,
    /// Overwrite the dimensions provided by the shape cue with its values.
    FromCues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub stages: Vec<StageConfig>,
    pub optimizer: AdamConfig,
    pub prev_state_refresh: PrevStateRefresh,
    pub beta_init: BetaInit,
    pub seed: u64,
    /// Stop a stage once the relative loss change over 10 iterations drops
    /// below this value.
    #[serde(default)]
    pub tol: Option<f64>,
}

/// Iteration budget presets named after the two initialisers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    MultihmrLike,
    CamerahmrLike,
}

impl Profile {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "multihmr_like" => Some(Self::MultihmrLike),
            "camerahmr_like" => Some(Self::CamerahmrLike),
            _ => None,
        }
    }
}

pub fn default_config(profile: Profile) -> FitConfig {
    let base = LossWeights {
        lambda_shape: 10.0,
        lambda_2d: 0.01,
        lambda_dense: 0.001,
        sigma: 100.0,
        ..LossWeights::default()
    };
    let rates = LearningRates {
        tau: 0.01,
        phi: 0.01,
        beta: 0.001,
        theta: 0.001,
    };
    let stage1 = StageConfig {
        name: "translation".into(),
        free_params: alloc::vec![ParamBlock::Tau],
        iterations: match profile {
            Profile::MultihmrLike => 50,
            Profile::CamerahmrLike => 200,
        },
        weights: LossWeights {
            lambda_init_tau_xy: 10.0,
            lambda_depth: 10.0,
            ..base
        },
        learning_rates: rates,
    };
    let stage2 = StageConfig {
        name: "global".into(),
        free_params: alloc::vec![ParamBlock::Tau, ParamBlock::Phi, ParamBlock::Beta],
        iterations: 100,
        weights: LossWeights {
            lambda_depth: 50.0,
            lambda_init_beta: 0.01,
            lambda_init_verts: 0.01,
            lambda_init_phi: 10.0,
            ..base
        },
        learning_rates: rates,
    };
    let stage3 = StageConfig {
        name: "full".into(),
        free_params: ParamBlock::ALL.to_vec(),
        iterations: 200,
        weights: LossWeights {
            lambda_depth: 0.0,
            lambda_init_phi: 0.01,
            lambda_init_verts: 0.01,
            lambda_init_beta: 5.0,
            ..base
        },
        learning_rates: rates,
    };
    FitConfig {
        stages: alloc::vec![stage1, stage2, stage3],
        optimizer: AdamConfig::default(),
        prev_state_refresh: PrevStateRefresh::StageStart,
        beta_init: BetaInit::FromCues,
        seed: 0,
        tol: None,
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("fit config needs at least one stage".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.iterations == 0 {
                return Err(Error::Config(alloc::format!(
                    "stage {i} has zero iterations"
                )));
            }
            if s.free_params.is_empty() {
                return Err(Error::Config(alloc::format!(
                    "stage {i} has no free parameters"
                )));
            }
            s.weights.validate()?;
        }
        if let Some(t) = self.tol {
            if !(t >= 0.0) {
                return Err(Error::Config("tol must be nonnegative".into()));
            }
        }
        Ok(())
    }

    /// Same stages with the depth term switched off everywhere.
    pub fn without_depth(mut self) -> Self {
        for s in &mut self.stages {
            s.weights.lambda_depth = 0.0;
        }
        self
    }

    /// Same stages with no use of the shape cue (loss and initialisation).
    pub fn without_shape(mut self) -> Self {
        for s in &mut self.stages {
            s.weights.lambda_shape = 0.0;
        }
        self.beta_init = BetaInit::Keep;
        self
    }

    pub fn with_depth_variant(mut self, variant: crate::losses::DepthVariant) -> Self {
        for s in &mut self.stages {
            s.weights.depth_variant = variant;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub name: String,
    /// Loss at the start of every iteration, before its update.
    pub losses: Vec<LossBreakdown>,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneResult {
    pub states: Vec<PersonState>,
    pub traces: Vec<StageTrace>,
    /// Loss of the final states under the last stage's weights.
    pub final_loss: LossBreakdown,
}

impl SceneResult {
    pub fn iterations(&self) -> usize {
        self.traces.iter().map(|t| t.losses.len()).sum()
    }
}

fn initial_states(
    init: &[PersonState],
    cues: &[PersonCues],
    config: &FitConfig,
) -> Vec<PersonState> {
    let mut states = init.to_vec();
    if config.beta_init == BetaInit::FromCues {
        for (s, c) in states.iter_mut().zip(cues) {
            for (k, b) in s.beta.iter_mut().enumerate() {
                if c.shape.provided.get(k).copied().unwrap_or(false) {
                    *b = c.shape.values[k];
                }
            }
            s.clamp_beta();
        }
    }
    states
}

fn converged(trace: &[LossBreakdown], tol: f64) -> bool {
    let n = trace.len();
    if n <= 10 {
        return false;
    }
    let (old, new) = (trace[n - 11].total, trace[n - 1].total);
    (old - new).abs() <= tol * old.abs().max(1e-12)
}

/// Runs every stage in order, updating all persons jointly at each step.
pub fn fit_scene(
    model: &BodyModel,
    init_states: &[PersonState],
    cues: &[PersonCues],
    camera: &Intrinsics,
    config: &FitConfig,
) -> Result<SceneResult> {
    config.validate()?;
    camera.validate()?;
    if init_states.is_empty() {
        return Err(Error::Config("scene has no persons".into()));
    }
    if cues.len() != init_states.len() {
        return Err(Error::Dimension {
            what: "person cues",
            expected: init_states.len(),
            got: cues.len(),
        });
    }
    for s in init_states {
        s.validate(model.config())?;
    }
    let mut states = initial_states(init_states, cues, config);
    let first = states.clone();
    let mut traces = Vec::with_capacity(config.stages.len());
    let mut final_loss = LossBreakdown::default();
    for (si, stage) in config.stages.iter().enumerate() {
        let prev = match config.prev_state_refresh {
            PrevStateRefresh::StageStart => states.clone(),
            PrevStateRefresh::Initial => first.clone(),
        };
        let objective = SceneObjective::new(model, camera, cues, &prev, stage.weights)?;
        let mut adam = Adam::new(config.optimizer, &states);
        let clamp = stage.free_params.contains(&ParamBlock::Beta);
        let mut losses = Vec::with_capacity(stage.iterations);
        let mut stopped_early = false;
        for it in 0..stage.iterations {
            let (loss, grads) = match objective.evaluate(&states, true) {
                Ok((l, Some(g))) => (l, g),
                Ok((_, None)) => unreachable!("gradient requested"),
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::Divergence {
                        stage: si,
                        iteration: it,
                        value: f64::NAN,
                    });
                }
                Err(e) => return Err(e),
            };
            if grads.iter().any(|g| g.coords().any(|x| !x.is_finite())) {
                return Err(Error::Divergence {
                    stage: si,
                    iteration: it,
                    value: loss.total,
                });
            }
            losses.push(loss);
            if let Some(tol) = config.tol {
                if converged(&losses, tol) {
                    stopped_early = true;
                    break;
                }
            }
            adam.step(
                &mut states,
                &grads,
                &stage.free_params,
                &stage.learning_rates,
            )?;
            if clamp {
                states.iter_mut().for_each(PersonState::clamp_beta);
            }
        }
        log::debug!(
            "stage {} ({}) finished after {} iterations",
            si,
            stage.name,
            losses.len()
        );
        if si + 1 == config.stages.len() {
            final_loss = objective
                .evaluate(&states, false)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Divergence {
                        stage: si,
                        iteration: stage.iterations,
                        value: f64::NAN,
                    },
                    e => e,
                })?
                .0;
        }
        traces.push(StageTrace {
            name: stage.name.clone(),
            losses,
            stopped_early,
        });
    }
    Ok(SceneResult {
        states,
        traces,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_values() {
        let m = default_config(Profile::MultihmrLike);
        let c = default_config(Profile::CamerahmrLike);
        assert_eq!(m.stages[0].iterations, 50);
        assert_eq!(c.stages[0].iterations, 200);
        assert_eq!(m.stages[1].iterations, 100);
        assert_eq!(m.stages[2].iterations, 200);
        assert_eq!(m.stages[1].weights.lambda_depth, 50.0);
        assert_eq!(m.stages[0].weights.lambda_depth, 10.0);
        assert_eq!(m.stages[0].weights.lambda_init_tau_xy, 10.0);
        assert_eq!(m.stages[2].weights.lambda_depth, 0.0);
        assert_eq!(m.stages[2].weights.lambda_init_beta, 5.0);
        assert_eq!(m.stages[1].weights.lambda_init_phi, 10.0);
        for s in &m.stages {
            assert_eq!(s.learning_rates.theta, 0.001);
            assert_eq!(s.learning_rates.beta, 0.001);
            assert_eq!(s.learning_rates.tau, 0.01);
            assert_eq!(s.weights.lambda_shape, 10.0);
            assert_eq!(s.weights.lambda_2d, 0.01);
            assert_eq!(s.weights.lambda_dense, 0.001);
            assert_eq!(s.weights.sigma, 100.0);
        }
        assert_eq!(m.stages[0].free_params, [ParamBlock::Tau]);
        assert_eq!(m.stages[2].free_params.len(), 4);
        m.validate().unwrap();
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = default_config(Profile::MultihmrLike);
        c.stages[1].iterations = 0;
        assert!(c.validate().is_err());
        let mut c = default_config(Profile::MultihmrLike);
        c.stages[0].free_params.clear();
        assert!(c.validate().is_err());
        let mut c = default_config(Profile::MultihmrLike);
        c.stages.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn convergence_window() {
        let flat: Vec<LossBreakdown> = (0..11)
            .map(|_| LossBreakdown {
                total: 2.0,
                ..Default::default()
            })
            .collect();
        assert!(converged(&flat, 1e-6));
        assert!(!converged(&flat[..10], 1e-6));
    }
}
