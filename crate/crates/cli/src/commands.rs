use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use acrkn_core::data::{split_indices, TEST_FRACTION};
use acrkn_core::eval::predict_multistep;
use acrkn_core::experiment::{run_grid, score};
use acrkn_core::io::{load_csv, write_csv, Manifest, Split, MANIFEST_FORMAT, MANIFEST_VERSION};
use acrkn_core::models::{InverseConfig, PARAM_GROUPS};
use acrkn_core::train::{rng_stream, write_metrics, STREAM_INIT};
use acrkn_core::{
    Conditioning, ControlKind, CoreError, Dataset, LossKind, Mode, ModelConfig, Network, ResolvedConfig, RunConfig,
    Score, SequenceBatch, SyntheticSystem, SystemKind, TrainedModel, Variant, VariantResult,
};
use acrkn_numerics::{finite_diff_check_where, ParamStore};
use serde_json::json;

use crate::args::{
    Ablation, AblateArgs, EvaluateArgs, GenDataArgs, GradcheckArgs, ModeArg, PredictArgs, TrainArgs,
};

pub const RUN_TAG: &str = "acrkn-run";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration; exit code 1.
    Usage(String),
    /// Anything that went wrong while running; exit code 2.
    Runtime(String),
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn usage(e: impl ToString) -> CliError {
    CliError::Usage(e.to_string())
}

type Result<T> = std::result::Result<T, CliError>;

/// A dataset with its train/test split.
struct Source {
    all: Dataset,
    train: Dataset,
    test: Dataset,
}

/// `data_ref` is either a dataset manifest, whose split is used, or a bare CSV,
/// which is split 4:1 with seed 0.
fn load_source(data_ref: &str) -> Result<Source> {
    let path = Path::new(data_ref);
    if path.extension().is_some_and(|e| e == "json") {
        let manifest = Manifest::load(path)?;
        let csv = path.parent().unwrap_or(Path::new(".")).join(&manifest.data);
        let all = load_csv(csv)?;
        let train = all.select_ids(&manifest.split.train)?;
        let test = all.select_ids(&manifest.split.test)?;
        Ok(Source { all, train, test })
    } else {
        let all = load_csv(path)?;
        let (train, test) = split_indices(all.len(), TEST_FRACTION, 0)?;
        Ok(Source {
            train: all.subset(&train),
            test: all.subset(&test),
            all,
        })
    }
}

/// Holds out `fraction` of the training episodes for validation.
fn carve_validation(train: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Option<Dataset>)> {
    if fraction == 0.0 || train.len() < 2 {
        return Ok((train.clone(), None));
    }
    let (fit, val) = split_indices(train.len(), fraction, seed)?;
    Ok((train.subset(&fit), Some(train.subset(&val))))
}

fn load_config(file: Option<&Path>, flags: &RunConfig) -> Result<RunConfig> {
    let base = match file {
        Some(path) => RunConfig::load(path).map_err(usage)?,
        None => RunConfig::default(),
    };
    Ok(base.merged(flags))
}

fn dataset_ref(cfg: &RunConfig) -> Result<String> {
    cfg.data
        .clone()
        .ok_or_else(|| usage("no dataset given: pass --data or set `data` in the config file"))
}

fn write_json(path: impl AsRef<Path>, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(path, text)?
        }
        None => print!("{text}"),
    }
    Ok(())
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    if args.len < 2 {
        return Err(usage(format!("--len must be >= 2, got {}", args.len)));
    }
    if args.episodes == 0 {
        return Err(usage("--episodes must be >= 1"));
    }
    let mut system = SyntheticSystem::new(args.system);
    if let Some(noise) = args.noise {
        system.noise = noise;
    }
    system.validate().map_err(usage)?;
    let data = system.simulate(args.episodes, args.len, args.seed)?;
    let (train, test) = split_indices(data.len(), TEST_FRACTION, args.seed)?;
    fs::create_dir_all(&args.out)?;
    write_csv(args.out.join("data.csv"), &data)?;
    Manifest {
        format: MANIFEST_FORMAT.to_string(),
        version: MANIFEST_VERSION,
        data: "data.csv".to_string(),
        system: Some(system),
        episodes: args.episodes,
        len: args.len,
        seed: args.seed,
        obs_dim: data.obs_dim,
        action_dim: data.action_dim,
        split: Split {
            train: train.iter().map(|&i| data.episodes[i].id).collect(),
            test: test.iter().map(|&i| data.episodes[i].id).collect(),
        },
    }
    .save(args.out.join("manifest.json"))?;
    println!(
        "wrote {} episodes of {} to {}",
        args.episodes,
        args.system,
        args.out.display()
    );
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref(), &args.flags.to_run_config())?;
    let data_ref = dataset_ref(&cfg)?;
    let source = load_source(&data_ref)?;
    let mode: Mode = args.mode.into();
    let resolved = cfg
        .resolve(mode, source.all.obs_dim, source.all.action_dim)
        .map_err(usage)?;
    let (fit, val) = carve_validation(&source.train, resolved.val_fraction, resolved.train.seed)?;
    fs::create_dir_all(&args.out)?;

    let (model, outcome) = TrainedModel::fit(&resolved, &fit, val.as_ref(), |m| {
        log::info!("epoch {}: train {:.6} val {:.6}", m.epoch, m.train_loss, m.val_loss)
    })?;
    model.save(args.out.join("model.json"))?;
    write_metrics(args.out.join("metrics.csv"), &outcome.metrics)?;
    write_json(
        args.out.join("run.json"),
        &json!({
            "format": RUN_TAG,
            "version": 1,
            "command": match args.mode { ModeArg::Forward => "train forward", ModeArg::Inverse => "train inverse" },
            "data": data_ref,
            "config": resolved,
            "episodes": {
                "train": fit.ids(),
                "validation": val.as_ref().map(Dataset::ids).unwrap_or_default(),
                "test": source.test.ids(),
            },
            "best_epoch": outcome.best_epoch,
            "psd_clamps": outcome.psd_clamps,
        }),
    )?;
    let last = outcome.metrics.last();
    println!(
        "trained {} epochs (best {}), final train loss {}, wrote {}",
        outcome.metrics.len(),
        outcome.best_epoch,
        last.map_or(f64::NAN, |m| m.train_loss),
        args.out.display()
    );
    Ok(())
}

fn checkpoint_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("model.json")
    } else {
        path.to_path_buf()
    }
}

fn score_rows(name: &str, s: &Score, out: &mut String) {
    let mut row = |metric: &str, h: usize, v: f64| {
        let _ = writeln!(out, "{name},{metric},{h},{v}");
    };
    match s {
        Score::Forward { rmse, nll, .. } => {
            for (h, v) in rmse.iter().enumerate() {
                row("rmse", h + 1, *v);
            }
            for (h, v) in nll.iter().flatten().enumerate() {
                row("nll", h + 1, *v);
            }
        }
        Score::Inverse { action_rmse } => row("action_rmse", 1, *action_rmse),
    }
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let model = TrainedModel::load(checkpoint_path(&args.model))?;
    let data_ref = args
        .data
        .clone()
        .or_else(|| model.config.data.clone())
        .ok_or_else(|| usage("the checkpoint names no dataset: pass --data"))?;
    let source = load_source(&data_ref)?;
    model.check_data(&source.test)?;
    if args.eval.horizon == 0 {
        return Err(usage("--horizon must be >= 1"));
    }
    let opts = args.eval.options();
    let result = score(&model, &source.test, &opts)?;

    let mut out = String::from("model,metric,horizon,value\n");
    score_rows("ac-rkn", &result, &mut out);
    if let Score::Forward { copy_last, .. } = &result {
        for (h, v) in copy_last.iter().enumerate() {
            let _ = writeln!(out, "copy-last,rmse,{},{v}", h + 1);
        }
    }
    if args.aao_baseline {
        if model.config.mode != Mode::Forward {
            return Err(usage("--aao-baseline applies to forward models"));
        }
        let mut cfg = model.config.clone();
        cfg.model.conditioning = Conditioning::ActionsAsObservations;
        let (fit, val) = carve_validation(&source.train, cfg.val_fraction, cfg.train.seed)?;
        let (baseline, _) = TrainedModel::fit(&cfg, &fit, val.as_ref(), |_| {})?;
        score_rows("actions-as-observations", &score(&baseline, &source.test, &opts)?, &mut out);
    }
    emit(args.out.as_deref(), &out)
}

pub fn predict(args: &PredictArgs) -> Result<()> {
    let model = TrainedModel::load(checkpoint_path(&args.model))?;
    let Network::Forward(forward) = &model.network else {
        return Err(usage("predict needs a forward model"));
    };
    let source = load_source(&args.data)?;
    model.check_data(&source.all)?;
    let episode = source
        .all
        .episodes
        .iter()
        .find(|e| e.id == args.episode)
        .ok_or_else(|| usage(format!("episode {} is not in the dataset", args.episode)))?;
    if args.observed == 0 || args.observed > episode.len() {
        return Err(usage(format!(
            "--observed must be in 1..={}, got {}",
            episode.len(),
            args.observed
        )));
    }
    let predictions = predict_multistep(
        forward,
        &model.store,
        &model.norm,
        &episode.observations[..args.observed],
        &episode.actions,
        args.horizon,
    )
    .map_err(usage)?;
    let d_o = source.all.obs_dim;
    let mut out = String::from("t");
    for i in 1..=d_o {
        let _ = write!(out, ",o_{i}");
    }
    out.push('\n');
    for (k, o) in predictions.iter().enumerate() {
        let _ = write!(out, "{}", args.observed + k);
        for v in o {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    emit(args.out.as_deref(), &out)
}

fn gradcheck_config(kind: ControlKind, inverse: bool, variance_head: bool) -> ModelConfig {
    ModelConfig {
        obs_dim: 2,
        action_dim: 1,
        latent_obs_dim: 3,
        num_basis: 2,
        bandwidth: 2,
        encoder_hidden: vec![6],
        decoder_hidden: vec![6],
        variance_head,
        conditioning: Conditioning::Control(kind),
        control_hidden: vec![6],
        control_basis: 2,
        init_var: 1.0,
        inverse: inverse.then(|| InverseConfig {
            action_decoder_hidden: vec![6],
            lambda: 0.5,
            action_feedback: true,
        }),
    }
}

/// Two toy episodes of five steps with two observation channels.
fn gradcheck_data(seed: u64) -> Result<Dataset> {
    let raw = SyntheticSystem::new(SystemKind::PendulumLag).simulate(2, 5, seed)?;
    let episodes = raw
        .episodes
        .into_iter()
        .map(|mut e| {
            e.observations = e.observations.iter().map(|o| vec![o[0].sin(), o[0].cos()]).collect();
            e
        })
        .collect();
    Ok(Dataset::new(2, 1, episodes)?)
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<()> {
    if !(args.tol > 0.0) || !(args.eps > 0.0) {
        return Err(usage("--tol and --eps must be positive"));
    }
    let data = gradcheck_data(args.seed)?;
    let refs: Vec<_> = data.episodes.iter().collect();
    let full = SequenceBatch::new(&data, &refs)?;
    let masked = full
        .clone()
        .with_masks(&[vec![true, false, true, true, false], vec![true, true, false, false, true]])?;

    let mut cases: Vec<(String, ModelConfig, &SequenceBatch, LossKind)> = Vec::new();
    for kind in ControlKind::ALL {
        cases.push((format!("forward-{kind}"), gradcheck_config(kind, false, false), &masked, LossKind::Rmse));
    }
    cases.push(("forward-nll".into(), gradcheck_config(ControlKind::Nonlinear, false, true), &masked, LossKind::Nll));
    cases.push(("inverse".into(), gradcheck_config(ControlKind::Nonlinear, true, false), &full, LossKind::Rmse));

    let mut failed = 0;
    let mut checked = 0;
    println!("model,group,entries,max_rel_error,status");
    for (name, config, batch, kind) in cases {
        let mut store = ParamStore::new();
        let net = Network::new(&config, &mut store, &mut rng_stream(args.seed, STREAM_INIT))?;
        for group in PARAM_GROUPS {
            let prefix = format!("{group}.");
            let report = finite_diff_check_where(
                &mut store,
                |g, s| net.loss(g, s, batch, kind),
                args.eps,
                args.tol,
                |n| n.starts_with(&prefix),
            )?;
            if report.params.is_empty() {
                continue;
            }
            checked += 1;
            let entries: usize = report.params.iter().map(|p| p.entries).sum();
            let pass = report.passed();
            failed += usize::from(!pass);
            println!(
                "{name},{group},{entries},{:.3e},{}",
                report.max_rel_error(),
                if pass { "PASS" } else { "FAIL" }
            );
        }
    }
    println!("{} of {checked} groups within {:e}", checked - failed, args.tol);
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} parameter groups exceed --tol {:e}", args.tol)));
    }
    Ok(())
}

fn ablation_table(results: &[VariantResult], ablation: Ablation, horizon: usize) -> String {
    let mut out = String::from("variant,seeds");
    match ablation {
        Ablation::ControlKind => {
            for h in 1..=horizon {
                let _ = write!(out, ",rmse_h{h}");
            }
        }
        Ablation::ActionFeedback => out.push_str(",action_rmse"),
    }
    out.push('\n');
    for r in results {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        let _ = write!(out, "{},{}", r.name, seeds.join(";"));
        for v in r.median() {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn ablate(args: &AblateArgs) -> Result<()> {
    if args.seeds.len() < 3 {
        return Err(usage(format!("ablations need at least 3 seeds, got {}", args.seeds.len())));
    }
    let mut seeds = args.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    if seeds.len() != args.seeds.len() {
        return Err(usage("--seeds must be distinct"));
    }
    if args.eval.horizon == 0 {
        return Err(usage("--horizon must be >= 1"));
    }
    let mut base = load_config(args.config.as_deref(), &args.flags.to_run_config())?;
    let data_ref = dataset_ref(&base)?;
    let source = load_source(&data_ref)?;
    let (d_o, d_a) = (source.all.obs_dim, source.all.action_dim);

    let (mode, overrides): (Mode, Vec<(String, RunConfig)>) = match args.ablate {
        Ablation::ControlKind => {
            base.actions_as_observations = None;
            (
                Mode::Forward,
                [ControlKind::Linear, ControlKind::LocallyLinear, ControlKind::Nonlinear]
                    .into_iter()
                    .map(|kind| {
                        (
                            kind.to_string(),
                            RunConfig {
                                control_kind: Some(kind),
                                ..base.clone()
                            },
                        )
                    })
                    .collect(),
            )
        }
        Ablation::ActionFeedback => (
            Mode::Inverse,
            [("feedback", true), ("no-feedback", false)]
                .into_iter()
                .map(|(name, on)| {
                    (
                        name.to_string(),
                        RunConfig {
                            action_feedback: Some(on),
                            ..base.clone()
                        },
                    )
                })
                .collect(),
        ),
    };
    let variants = overrides
        .into_iter()
        .map(|(name, cfg)| {
            Ok(Variant {
                name,
                config: cfg.resolve(mode, d_o, d_a).map_err(usage)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let first: &ResolvedConfig = &variants[0].config;
    let (fit, val) = carve_validation(&source.train, first.val_fraction, first.train.seed)?;
    let results = run_grid(&variants, &args.seeds, &fit, val.as_ref(), &source.test, &args.eval.options())?;

    let table = ablation_table(&results, args.ablate, args.eval.horizon);
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("ablation.csv"), &table)?;
    write_json(
        args.out.join("run.json"),
        &json!({
            "format": RUN_TAG,
            "version": 1,
            "command": "ablate",
            "data": data_ref,
            "seeds": args.seeds,
            "eval": args.eval.options(),
            "variants": variants.iter().map(|v| json!({"name": v.name, "config": v.config})).collect::<Vec<_>>(),
            "episodes": {
                "train": fit.ids(),
                "validation": val.as_ref().map(Dataset::ids).unwrap_or_default(),
                "test": source.test.ids(),
            },
        }),
    )?;
    print!("{table}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use acrkn_core::experiment::MODEL_TAG;

    #[test]
    fn ablation_table_layout() {
        let r = VariantResult {
            name: "linear".into(),
            seeds: vec![0, 1, 2],
            scores: vec![
                Score::Forward { rmse: vec![1.0, 2.0], copy_last: vec![0.0; 2], nll: None },
                Score::Forward { rmse: vec![3.0, 4.0], copy_last: vec![0.0; 2], nll: None },
                Score::Forward { rmse: vec![2.0, 9.0], copy_last: vec![0.0; 2], nll: None },
            ],
        };
        assert_eq!(
            ablation_table(&[r], Ablation::ControlKind, 2),
            "variant,seeds,rmse_h1,rmse_h2\nlinear,0;1;2,2,4\n"
        );
    }

    #[test]
    fn tag_is_distinct_from_the_checkpoint_tag() {
        assert_ne!(RUN_TAG, MODEL_TAG);
    }
}
