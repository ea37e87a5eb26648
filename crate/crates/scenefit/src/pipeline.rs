//! Batch operations behind the command line: scene generation, fitting,
//! evaluation, mesh refitting, gradient checks and report tables.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use scenefit_core::body_model::KeypointSet;
use scenefit_core::diff::{fd_check, FdCheck, COMPOSED_REL_TOL, FD_STEP};
use scenefit_core::losses::SceneObjective;
use scenefit_core::math::Vec3;
use scenefit_core::metrics::{
    aggregate, evaluate_scene, percentile_filter, MetricReport, SceneMetrics,
};
use scenefit_core::refit::{refit, RefitConfig};
use scenefit_core::synth::{derive_cues, perturb_init, sample_scene, NoiseConfig, PlacementConfig};
use scenefit_core::{
    default_config, fit_scene, AttributeCatalog, BodyModel, BodyModelData, FitConfig, Intrinsics,
    LossBreakdown, PersonCues, PersonState, Profile, SceneResult,
};

use crate::io::{
    config_hash, read_json, read_versioned, FitsFile, MeshFile, MetricRow, PersonRecord,
    RefitEntry, RefitFile, SceneFile, SceneFit, SceneRecord, TraceRow, FORMAT_VERSION,
};

pub const DEFAULT_PROFILE: Profile = Profile::MultihmrLike;

pub fn load_model(path: Option<&Path>) -> Result<BodyModel> {
    match path {
        None => Ok(BodyModel::default_humanoid()),
        Some(p) => {
            let data: BodyModelData = read_json(p)?;
            BodyModel::new(data).with_context(|| format!("{}: invalid body model", p.display()))
        }
    }
}

pub fn load_catalog(path: Option<&Path>) -> Result<AttributeCatalog> {
    let catalog = match path {
        None => AttributeCatalog::default(),
        Some(p) => read_json(p)?,
    };
    catalog.validate().context("invalid attribute anchors")?;
    Ok(catalog)
}

/// `profile=NAME` selects a built-in schedule, anything else is a JSON path.
pub fn load_config(spec: Option<&str>) -> Result<FitConfig> {
    let config = match spec {
        None => default_config(DEFAULT_PROFILE),
        Some(s) => match s.strip_prefix("profile=") {
            Some(name) => default_config(
                Profile::parse(name).ok_or_else(|| anyhow!("unknown profile {name:?}"))?,
            ),
            None => read_json(Path::new(s))?,
        },
    };
    config.validate().context("invalid fit config")?;
    Ok(config)
}

/// `preset=zero` or `preset=noisy`, anything else is a JSON path.
pub fn load_noise(spec: Option<&str>, catalog: &AttributeCatalog) -> Result<NoiseConfig> {
    let noise = match spec {
        None | Some("preset=zero") => NoiseConfig::zero(),
        Some("preset=noisy") => NoiseConfig::noisy(),
        Some(s) if s.starts_with("preset=") => bail!("unknown noise preset {s:?}"),
        Some(s) => read_json(Path::new(s))?,
    };
    noise.validate(catalog).context("invalid noise config")?;
    Ok(noise)
}

pub fn read_scenes(path: &Path, model: &BodyModel) -> Result<SceneFile> {
    let file: SceneFile = read_versioned(path)?;
    file.validate(model, &path.display().to_string())?;
    Ok(file)
}

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub n_scenes: usize,
    pub persons_min: usize,
    pub persons_max: usize,
    pub seed: u64,
    pub with_gt: bool,
    pub camera: Intrinsics,
    pub placement: PlacementConfig,
    pub noise: NoiseConfig,
}

/// Samples scenes, cues and initial states; fully determined by the seed.
pub fn generate(
    model: &BodyModel,
    catalog: &AttributeCatalog,
    opts: &GenerateOptions,
) -> Result<SceneFile> {
    if opts.persons_min == 0 || opts.persons_min > opts.persons_max {
        bail!(
            "need 1 <= persons-min <= persons-max, got {}..{}",
            opts.persons_min,
            opts.persons_max
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let plan: Vec<(u64, usize, u64)> = (0..opts.n_scenes as u64)
        .map(|id| {
            let n = rng.random_range(opts.persons_min..=opts.persons_max);
            (id, n, rng.random())
        })
        .collect();
    let scenes = plan
        .par_iter()
        .map(|&(id, n, seed)| {
            let mut gt = sample_scene(model, catalog, &opts.camera, n, seed, &opts.placement)
                .with_context(|| format!("scene {id}"))?;
            gt.id = id;
            let cues = derive_cues(model, catalog, &gt, &opts.noise, seed.wrapping_add(1))?;
            let inits = perturb_init(model, &gt, &opts.noise, seed.wrapping_add(2));
            let persons = gt
                .persons
                .into_iter()
                .zip(cues.persons)
                .zip(inits)
                .map(|((g, c), i)| PersonRecord {
                    gt: opts.with_gt.then_some(g),
                    cues: Some(c),
                    init: Some(i),
                })
                .collect();
            Ok(SceneRecord { id, seed, persons })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneFile {
        version: FORMAT_VERSION.into(),
        camera: opts.camera,
        scenes,
    })
}

fn thread_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        if j == 0 {
            bail!("--jobs must be at least 1");
        }
        b = b.num_threads(j);
    }
    Ok(b.build()?)
}

/// Mean pixel distance of the projected sparse keypoints to every
/// observation with positive confidence.
pub fn reprojection_px(
    model: &BodyModel,
    camera: &Intrinsics,
    state: &PersonState,
    cues: &PersonCues,
) -> Result<Option<f64>> {
    let mesh = model.synthesize(state)?;
    let uv = camera.project(&model.regress_keypoints(&mesh, KeypointSet::Sparse)?)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for ((p, o), c) in uv
        .iter()
        .zip(&cues.keypoints.points)
        .zip(&cues.keypoints.confidences)
    {
        if *c > 0.0 {
            sum += ((p[0] - o[0]).powi(2) + (p[1] - o[1]).powi(2)).sqrt();
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

fn scene_inputs(scene: &SceneRecord) -> Result<(Vec<PersonState>, Vec<PersonCues>)> {
    let inits = scene
        .inits()
        .ok_or_else(|| anyhow!("scene {}: every person needs an init state", scene.id))?;
    let cues = scene
        .cues()
        .ok_or_else(|| anyhow!("scene {}: every person needs cues", scene.id))?;
    Ok((inits, cues.persons))
}

pub struct FitOutput {
    pub fits: FitsFile,
    pub results: Vec<SceneResult>,
}

/// Fits every scene independently; output order follows the input.
pub fn fit_all(
    model: &BodyModel,
    scenes: &SceneFile,
    config: &FitConfig,
    jobs: Option<usize>,
) -> Result<FitOutput> {
    let camera = &scenes.camera;
    let pool = thread_pool(jobs)?;
    let out: Vec<(SceneFit, SceneResult)> = pool.install(|| {
        scenes
            .scenes
            .par_iter()
            .map(|scene| {
                let (inits, cues) = scene_inputs(scene)?;
                let r = fit_scene(model, &inits, &cues, camera, config)
                    .with_context(|| format!("scene {}", scene.id))?;
                let reprojection_px = r
                    .states
                    .iter()
                    .zip(&cues)
                    .map(|(s, c)| reprojection_px(model, camera, s, c))
                    .collect::<Result<_>>()?;
                let fit = SceneFit {
                    id: scene.id,
                    states: r.states.clone(),
                    reprojection_px,
                    final_loss: r.final_loss,
                    iterations: r.iterations(),
                };
                Ok((fit, r))
            })
            .collect::<Result<_>>()
    })?;
    let (fits, results) = out.into_iter().unzip();
    Ok(FitOutput {
        fits: FitsFile {
            version: FORMAT_VERSION.into(),
            config_hash: config_hash(config),
            seed: config.seed,
            scenes: fits,
        },
        results,
    })
}

pub fn trace_rows(ids: &[u64], results: &[SceneResult]) -> Vec<TraceRow> {
    let mut rows = Vec::new();
    for (id, r) in ids.iter().zip(results) {
        for t in &r.traces {
            for (iter, l) in t.losses.iter().enumerate() {
                for (term, value) in LossBreakdown::TERMS.iter().zip(l.values()) {
                    rows.push(TraceRow {
                        scene: *id,
                        stage: t.name.clone(),
                        iter,
                        term: (*term).into(),
                        value,
                    });
                }
            }
        }
    }
    rows
}

/// Evaluates the fitted states, or the initial states without `fits`.
pub fn evaluate(
    model: &BodyModel,
    catalog: &AttributeCatalog,
    scenes: &SceneFile,
    fits: Option<&FitsFile>,
) -> Result<(Vec<SceneMetrics>, MetricReport)> {
    if let Some(f) = fits {
        if f.scenes.len() != scenes.scenes.len() {
            bail!(
                "fits cover {} scenes, scene file has {}",
                f.scenes.len(),
                scenes.scenes.len()
            );
        }
    }
    let per_scene = scenes
        .scenes
        .par_iter()
        .map(|scene| {
            let gt = scene.ground_truth(&scenes.camera).ok_or_else(|| {
                anyhow!(
                    "scene {}: evaluation needs ground truth for every person",
                    scene.id
                )
            })?;
            let pred = match fits {
                Some(f) => {
                    let fit = f
                        .scenes
                        .iter()
                        .find(|s| s.id == scene.id)
                        .ok_or_else(|| anyhow!("no fit for scene {}", scene.id))?;
                    fit.states.clone()
                }
                None => scene_inputs(scene)?.0,
            };
            let cues = scene.cues();
            Ok(evaluate_scene(model, catalog, &gt, cues.as_ref(), &pred)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = aggregate(&per_scene);
    Ok((per_scene, report))
}

/// Keeps the scenes whose mean reprojection error lies within the given
/// nearest-rank percentiles.
pub fn pseudo_gt(fits: &FitsFile, lo: f64, hi: f64) -> Result<FitsFile> {
    if !(0.0..=100.0).contains(&lo) || !(lo..=100.0).contains(&hi) {
        bail!("percentile bounds need 0 <= lo <= hi <= 100, got {lo} and {hi}");
    }
    let scored: Vec<(usize, f64)> = fits
        .scenes
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.mean_reprojection().map(|e| (i, e)))
        .collect();
    let errors: Vec<f64> = scored.iter().map(|(_, e)| *e).collect();
    let keep = percentile_filter(&errors, lo, hi);
    Ok(FitsFile {
        scenes: keep
            .into_iter()
            .map(|k| fits.scenes[scored[k].0].clone())
            .collect(),
        ..fits.clone()
    })
}

pub fn read_meshes(path: &Path) -> Result<Vec<Vec<Vec3>>> {
    let file: MeshFile = read_versioned(path)?;
    Ok(file
        .meshes
        .iter()
        .map(|m| m.iter().map(|v| Vec3::new(v[0], v[1], v[2])).collect())
        .collect())
}

/// Refits each mesh; a failing mesh is reported in its entry.
pub fn refit_all(
    model: &BodyModel,
    meshes: &[Vec<Vec3>],
    config: &RefitConfig,
    jobs: Option<usize>,
) -> Result<RefitFile> {
    config.validate()?;
    let pool = thread_pool(jobs)?;
    let fits = pool.install(|| {
        meshes
            .par_iter()
            .map(|m| match refit(model, m, config) {
                Ok(r) => RefitEntry {
                    report: Some(r),
                    error: None,
                },
                Err(e) => RefitEntry {
                    report: None,
                    error: Some(e.to_string()),
                },
            })
            .collect()
    });
    Ok(RefitFile {
        version: FORMAT_VERSION.into(),
        fits,
    })
}

/// Central-difference check of the full objective on a random scene with
/// every loss term switched on.
pub fn gradcheck(
    model: &BodyModel,
    catalog: &AttributeCatalog,
    config: &FitConfig,
    persons: usize,
    seed: u64,
) -> Result<FdCheck> {
    let camera = Intrinsics::default();
    let noise = NoiseConfig::noisy();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = sample_scene(
        model,
        catalog,
        &camera,
        persons,
        rng.random(),
        &PlacementConfig::default(),
    )?;
    let cues = derive_cues(model, catalog, &scene, &noise, rng.random())?;
    let prev = perturb_init(model, &scene, &noise, rng.random());
    let states = perturb_init(model, &scene, &noise, rng.random());
    let mut weights = config
        .stages
        .iter()
        .map(|s| s.weights)
        .find(|w| w.lambda_depth > 0.0)
        .unwrap_or(config.stages[0].weights);
    let bump = |x: &mut f64, v: f64| {
        if *x == 0.0 {
            *x = v;
        }
    };
    bump(&mut weights.lambda_shape, 10.0);
    bump(&mut weights.lambda_depth, 10.0);
    bump(&mut weights.lambda_init_beta, 1.0);
    bump(&mut weights.lambda_init_phi, 1.0);
    bump(&mut weights.lambda_init_verts, 1.0);
    bump(&mut weights.lambda_init_tau_xy, 1.0);
    let objective = SceneObjective::new(model, &camera, &cues.persons, &prev, weights)?;
    Ok(fd_check(&objective, &states, FD_STEP, COMPOSED_REL_TOL)?)
}

/// Init, fitted and `fitted - init` rows.
pub fn compare(init: &MetricRow, fitted: &MetricRow) -> Vec<MetricRow> {
    let mut a = init.clone();
    a.label = "init".into();
    let mut b = fitted.clone();
    b.label = "fitted".into();
    let d = b.delta(&a, "delta");
    vec![a, b, d]
}

/// Loss traces pivoted to one row per iteration with a column per term.
pub fn trace_table(rows: &[TraceRow]) -> Vec<TraceWide> {
    let mut out: Vec<TraceWide> = Vec::new();
    for r in rows {
        let same = out
            .last()
            .is_some_and(|w| w.scene == r.scene && w.stage == r.stage && w.iter == r.iter);
        if !same {
            out.push(TraceWide {
                scene: r.scene,
                stage: r.stage.clone(),
                iter: r.iter,
                ..Default::default()
            });
        }
        let w = out.last_mut().expect("row pushed above");
        let slot = match r.term.as_str() {
            "2d" => &mut w.reproj_2d,
            "dense" => &mut w.dense,
            "shape" => &mut w.shape,
            "init" => &mut w.init,
            "depth" => &mut w.depth,
            "total" => &mut w.total,
            _ => continue,
        };
        *slot = Some(r.value);
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TraceWide {
    pub scene: u64,
    pub stage: String,
    pub iter: usize,
    #[serde(rename = "2d")]
    pub reproj_2d: Option<f64>,
    pub dense: Option<f64>,
    pub shape: Option<f64>,
    pub init: Option<f64>,
    pub depth: Option<f64>,
    pub total: Option<f64>,
}
