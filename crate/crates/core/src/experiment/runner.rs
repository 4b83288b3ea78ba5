use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Mode};
use crate::diffusion::{run_segmented_sampling, train_denoiser, write_trace_csv, DenoiserModel, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::timeline::write_timeline_csv;
use crate::toyworld::WorldSpec;
use crate::tpe::{derive_seed, mean_se, rollout, state_dim, summarize, train_policy, write_curve_csv, Actor, EpisodeRecord, EvalSummary, PolicyCritic};

pub const SCHEMA_VERSION: u32 = 1;

pub fn build_world(cfg: &ExperimentConfig) -> Result<WorldSpec> {
    WorldSpec::generate(cfg.world_seed, &cfg.world)
}

fn check_denoiser(model: &DenoiserModel, world: &WorldSpec) -> Result<()> {
    let same = model.meta.world_seed == world.seed
        && model.meta.dim == world.dim()
        && (model.meta.data_moment - world.data_second_moment()).abs() <= 1e-9 * world.data_second_moment();
    if same {
        Ok(())
    } else {
        Err(Error::ConfigInvalid("denoiser checkpoint was trained on a different world".into()))
    }
}

/// Trains the denoiser and writes its checkpoint and loss curve.
pub fn train_denoiser_artifact(cfg: &ExperimentConfig, world: &WorldSpec, mut log: impl FnMut(&str)) -> Result<DenoiserModel> {
    let path = cfg.denoiser_path();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let (model, curve) = train_denoiser(world, NoiseSchedule::linear_default(), &cfg.denoiser, |p| {
        log(&format!("step {} train_loss {:.5} heldout_loss {:.5}", p.step, p.train_loss, p.heldout_loss))
    })?;
    model.save(&path)?;
    let mut w = csv::Writer::from_path(path.with_extension("loss.csv"))?;
    for p in &curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(model)
}

pub fn load_denoiser(cfg: &ExperimentConfig, world: &WorldSpec, log: impl FnMut(&str)) -> Result<DenoiserModel> {
    let path = cfg.denoiser_path();
    let model = match DenoiserModel::load(&path) {
        Err(Error::MissingCheckpoint(_)) if cfg.train_if_missing => return train_denoiser_artifact(cfg, world, log),
        other => other?,
    };
    check_denoiser(&model, world)?;
    Ok(model)
}

fn policy_meta(cfg: &ExperimentConfig) -> serde_json::Value {
    serde_json::json!({
        "tau_e": cfg.env.latency.tau_e,
        "segment": cfg.env.latency.segment,
        "M": cfg.env.latency.m_steps,
        "masked": cfg.ppo.masked,
        "world_seed": cfg.world_seed,
    })
}

/// Trains a policy with PPO and writes its checkpoints and training curve.
pub fn train_policy_artifact(
    cfg: &ExperimentConfig,
    world: &WorldSpec,
    model: &dyn NoisePredictor,
    mut log: impl FnMut(&str),
) -> Result<PolicyCritic> {
    let dir = cfg.policy_path();
    let (pc, curve) = train_policy(model, world, &cfg.env, &cfg.sampling_for_training(), &cfg.ppo, |r| {
        log(&format!(
            "iteration {} return {:.4} score {:.4} residual {:.3} entropy {:.3}",
            r.iteration, r.mean_return, r.mean_score, r.mean_residual_latency, r.entropy
        ))
    })?;
    pc.save(&dir, policy_meta(cfg))?;
    write_curve_csv(&curve, BufWriter::new(fs::File::create(dir.join("training_curve.csv"))?))?;
    Ok(pc)
}

pub fn load_policy(cfg: &ExperimentConfig, world: &WorldSpec, model: &dyn NoisePredictor, log: impl FnMut(&str)) -> Result<PolicyCritic> {
    let dir = cfg.policy_path();
    let (pc, meta) = match PolicyCritic::load(&dir) {
        Err(Error::MissingCheckpoint(_)) if cfg.train_if_missing => return train_policy_artifact(cfg, world, model, log),
        other => other?,
    };
    if pc.policy.input_dim() != state_dim(world.k_max(), world.table.n_e) || pc.policy.output_dim() != 1 << world.k_max() {
        return Err(Error::ConfigInvalid("policy checkpoint does not fit this world".into()));
    }
    if meta != policy_meta(cfg) {
        return Err(Error::ConfigInvalid(format!("policy checkpoint was trained for {meta}, not {}", policy_meta(cfg))));
    }
    Ok(pc)
}

impl ExperimentConfig {
    /// PPO rollouts use the sampler of the configured mode's guidance, without the correction.
    pub fn sampling_for_training(&self) -> crate::diffusion::SamplingConfig {
        let mut s = self.sampling.clone();
        s.alpha = 0.0;
        s
    }
}

pub fn actor_for<'a>(mode: Mode, policy: Option<&'a PolicyCritic>, masked: bool, greedy: bool) -> Result<Actor<'a>> {
    Ok(match mode {
        Mode::Conventional => Actor::AllAtOnce,
        Mode::PgscRandom | Mode::ScdPgsc => Actor::RandomValid,
        Mode::TpePgsc | Mode::FastGsc => {
            let pc = policy.ok_or_else(|| Error::ConfigInvalid(format!("mode {} needs a policy", mode.name())))?;
            Actor::Learned { policy: &pc.policy, critic: None, masked, greedy }
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateMetrics {
    pub replicate: usize,
    pub seed: u64,
    pub episodes: usize,
    pub mean_score: f64,
    pub mean_residual_latency: f64,
    /// `mean_score / mean_residual_latency`.
    pub efficiency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(v: &[f64]) -> Self {
        let (mean, se) = mean_se(v);
        Self { mean, std: se * (v.len() as f64).sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub schema_version: u32,
    pub mode: Mode,
    pub alpha: f64,
    pub tau_e: f64,
    pub segment: usize,
    pub replicates: Vec<ReplicateMetrics>,
    pub score: MeanStd,
    pub residual_latency: MeanStd,
    /// `score.mean / residual_latency.mean`.
    pub efficiency: f64,
    /// Spread of the per-replicate efficiencies.
    pub efficiency_std: f64,
    /// Pooled over every episode of every replicate.
    pub summary: EvalSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub replicate: usize,
    pub episode: usize,
    pub units: String,
    pub score: f64,
    pub residual_latency: f64,
    pub discarded: String,
}

fn ids(v: &[usize]) -> String {
    v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
}

/// Seed of replicate `r`; identical across modes so that modes are compared on the same
/// requests and initial latents.
pub fn replicate_seed(cfg: &ExperimentConfig, r: usize) -> u64 {
    derive_seed(&[cfg.seed, r as u64])
}

/// Runs all replicates of the configured mode without touching the file system.
pub fn evaluate(
    cfg: &ExperimentConfig,
    world: &WorldSpec,
    model: &dyn NoisePredictor,
    policy: Option<&PolicyCritic>,
) -> Result<(Metrics, Vec<Vec<EpisodeRecord>>)> {
    let actor = actor_for(cfg.mode, policy, cfg.ppo.masked, cfg.greedy_policy)?;
    let sampling = cfg.mode_sampling();
    let runs: Vec<Result<Vec<EpisodeRecord>>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| rollout(&actor, model, world, &cfg.env, &sampling, cfg.episodes_per_replicate, replicate_seed(cfg, r)))
        .collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let reps: Vec<ReplicateMetrics> = runs
        .iter()
        .enumerate()
        .map(|(r, recs)| {
            let score = mean_se(&recs.iter().map(|e| e.score).collect::<Vec<_>>()).0;
            let resid = mean_se(&recs.iter().map(|e| e.residual_latency).collect::<Vec<_>>()).0;
            ReplicateMetrics {
                replicate: r,
                seed: replicate_seed(cfg, r),
                episodes: recs.len(),
                mean_score: score,
                mean_residual_latency: resid,
                efficiency: score / resid,
            }
        })
        .collect();
    let pooled: Vec<EpisodeRecord> = runs.iter().flatten().cloned().collect();
    let lat = &cfg.env.latency;
    let score = MeanStd::of(&reps.iter().map(|r| r.mean_score).collect::<Vec<_>>());
    let residual_latency = MeanStd::of(&reps.iter().map(|r| r.mean_residual_latency).collect::<Vec<_>>());
    let metrics = Metrics {
        schema_version: SCHEMA_VERSION,
        mode: cfg.mode,
        alpha: sampling.alpha,
        tau_e: lat.tau_e,
        segment: lat.segment,
        efficiency: score.mean / residual_latency.mean,
        efficiency_std: MeanStd::of(&reps.iter().map(|r| r.efficiency).collect::<Vec<_>>()).std,
        score,
        residual_latency,
        replicates: reps,
        summary: summarize(&pooled, cfg.ppo.gamma, lat.phases(), world.k_max()),
    };
    Ok((metrics, runs))
}

/// Runs an experiment and writes its run directory: `config.json`, `metrics.json`,
/// `episodes.csv`, and the timeline and sampling trace of the first episode.
pub fn run_experiment(cfg: &ExperimentConfig, mut log: impl FnMut(&str)) -> Result<Metrics> {
    cfg.validate()?;
    let world = build_world(cfg)?;
    let model = load_denoiser(cfg, &world, &mut log)?;
    let policy = if cfg.mode.uses_policy() { Some(load_policy(cfg, &world, &model, &mut log)?) } else { None };
    let (metrics, runs) = evaluate(cfg, &world, &model, policy.as_ref())?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    let mut w = csv::Writer::from_path(out.join("episodes.csv"))?;
    for (r, recs) in runs.iter().enumerate() {
        for (i, e) in recs.iter().enumerate() {
            w.serialize(EpisodeRow {
                replicate: r,
                episode: i,
                units: ids(&e.episode.request.ids()),
                score: e.score,
                residual_latency: e.residual_latency,
                discarded: ids(&e.episode.discarded()),
            })?;
        }
    }
    w.flush()?;
    if let Some(first) = runs.first().and_then(|r| r.first()) {
        let o = first.episode.outcome()?;
        if let Some(schedule) = &o.schedule {
            write_timeline_csv(
                BufWriter::new(fs::File::create(out.join("timeline.csv"))?),
                &first.episode.dispatches,
                &o.report,
                schedule,
                &cfg.env.latency,
            )?;
            // the first episode's latent comes from the same stream the rollout used
            let x0 = first_episode_latent(cfg, &world)?;
            let traced = run_segmented_sampling(&model, &world.table, schedule, &cfg.mode_sampling(), x0, Some(first.episode.request.ids()))?;
            write_trace_csv(&traced.trace, BufWriter::new(fs::File::create(out.join("trace.csv"))?))?;
        }
    }
    Ok(metrics)
}

fn first_episode_latent(cfg: &ExperimentConfig, world: &WorldSpec) -> Result<Vec<f64>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(&[replicate_seed(cfg, 0), 0]));
    crate::semunits::TaskRequest::sample(&world.table, cfg.env.min_units, cfg.env.max_units, &mut rng)?;
    Ok(crate::diffusion::initial_noise(rng.gen(), world.dim()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau_e: f64,
    pub segment: usize,
    pub alpha: f64,
    pub mean_score: f64,
    pub se_score: f64,
}

/// Mean score for every `(α, τ_e)` pair under the configured (non-learned) mode's order.
/// Every cell uses the same episode seeds.
pub fn sweep_alpha(
    cfg: &ExperimentConfig,
    world: &WorldSpec,
    model: &dyn NoisePredictor,
    policy: Option<&PolicyCritic>,
    alphas: &[f64],
    settings: &[(f64, usize)],
) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() || settings.is_empty() {
        return Err(Error::ConfigInvalid("sweep needs at least one alpha and one latency setting".into()));
    }
    if cfg.mode.uses_policy()
        && settings.iter().any(|&(t, s)| t != cfg.env.latency.tau_e || s != cfg.env.latency.segment)
    {
        return Err(Error::ConfigInvalid("a learned policy can only be swept at the latency it was trained for".into()));
    }
    let mut rows = Vec::new();
    for &(tau_e, segment) in settings {
        for &alpha in alphas {
            let mut c = cfg.clone();
            c.env.latency.tau_e = tau_e;
            c.env.latency.segment = segment;
            c.normalize();
            c.sampling.alpha = alpha;
            // the α = 0 column is the plain pipeline of the same order
            c.mode = match (cfg.mode, alpha == 0.0) {
                (Mode::ScdPgsc | Mode::PgscRandom, false) => Mode::ScdPgsc,
                (Mode::ScdPgsc | Mode::PgscRandom, true) => Mode::PgscRandom,
                (Mode::FastGsc | Mode::TpePgsc, false) => Mode::FastGsc,
                (Mode::FastGsc | Mode::TpePgsc, true) => Mode::TpePgsc,
                (Mode::Conventional, _) => Mode::Conventional,
            };
            c.validate()?;
            let (m, runs) = evaluate(&c, world, model, policy)?;
            let scores: Vec<f64> = runs.iter().flatten().map(|e| e.score).collect();
            let (mean, se) = mean_se(&scores);
            debug_assert!((mean - m.summary.mean_score).abs() < 1e-12);
            rows.push(SweepRow { tau_e, segment, alpha, mean_score: mean, se_score: se });
        }
    }
    Ok(rows)
}

pub fn write_rows_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub mode: String,
    pub alpha: f64,
    pub tau_e: f64,
    pub score_mean: f64,
    pub score_std: f64,
    pub residual_mean: f64,
    pub efficiency: f64,
}

/// Collects `metrics.json` from run directories into one table.
pub fn report(dirs: &[PathBuf]) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for d in dirs {
        let path = d.join("metrics.json");
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path));
        }
        let m: Metrics = serde_json::from_str(&fs::read_to_string(&path)?)?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(Error::ConfigInvalid(format!("{} has schema version {}", path.display(), m.schema_version)));
        }
        rows.push(ReportRow {
            run: d.display().to_string(),
            mode: m.mode.name().into(),
            alpha: m.alpha,
            tau_e: m.tau_e,
            score_mean: m.score.mean,
            score_std: m.score.std,
            residual_mean: m.residual_latency.mean,
            efficiency: m.efficiency,
        });
    }
    Ok(rows)
}

/// Best α per latency setting (first maximum on ties).
pub fn best_alpha(rows: &[SweepRow]) -> BTreeMap<String, f64> {
    let mut best: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for r in rows {
        let key = format!("{}", r.tau_e);
        let e = best.entry(key).or_insert((r.alpha, r.mean_score));
        if r.mean_score > e.1 {
            *e = (r.alpha, r.mean_score);
        }
    }
    best.into_iter().map(|(k, (a, _))| (k, a)).collect()
}
