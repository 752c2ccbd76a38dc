//! Implementations of the `fairgen` subcommands.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fairgen::dataset::{generate_synthetic, Dataset};
use fairgen::metrics::MetricsReport;
use fairgen::model::Model;
use fairgen::trainer::{
    filter_normalized_direction, loss_landscape_slice, predict, Clock, LandscapeGrid,
    TrainRunConfig, Trainer,
};
use fairgen::ParameterStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::RunConfigFile;
use crate::data::{self, Vocabulary};
use crate::report::{self, NamedReport};
use crate::{history, CliError, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.tsv";

/// The configured dataset: the CSV file if one is named, else the synthetic
/// recipe.
pub fn load_dataset(cfg: &RunConfigFile, vocab: Option<&Vocabulary>) -> Result<Dataset> {
    match &cfg.dataset.csv {
        Some(path) => data::load_csv(path, cfg.dataset.image(), vocab),
        None => Ok(generate_synthetic(&cfg.dataset.spec())?),
    }
}

/// Training and evaluation parts of the configured dataset. Without a
/// holdout fraction both are the full dataset.
pub fn split_dataset(
    cfg: &RunConfigFile,
    vocab: Option<&Vocabulary>,
) -> Result<(Dataset, Dataset, &'static str)> {
    let full = load_dataset(cfg, vocab)?;
    match data::split(&full, cfg.dataset.holdout) {
        (train, Some(test)) => Ok((train, test, "holdout")),
        (train, None) => Ok((train.clone(), train, "train")),
    }
}

pub fn cmd_gen_data(cfg: &RunConfigFile, out: &Path) -> Result<Dataset> {
    let dataset = generate_synthetic(&cfg.dataset.spec())?;
    data::write_csv(out, &dataset)?;
    crate::write_file(
        &data::sidecar(out, "stats.tsv"),
        data::stats_table(&dataset),
    )?;
    Ok(dataset)
}

struct WallClock(Instant);

impl Clock for WallClock {
    fn elapsed(&mut self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Fields that may differ between an interrupted run and its resumption.
fn resumable(cfg: &RunConfigFile) -> RunConfigFile {
    let mut c = cfg.clone();
    c.train.max_iterations = None;
    c.train.checkpoint_every = None;
    c.eval = Default::default();
    c.landscape = Default::default();
    c
}

pub struct TrainOutcome {
    pub params: ParameterStore,
    pub run: TrainRunConfig,
    pub vocabulary: Vocabulary,
}

/// Trains into `out_dir`, writing the checkpoint (plus sidecar) and the
/// history log at the configured cadence and at the end. Per-epoch loss
/// means go to `progress`; wall time goes to stderr only.
pub fn cmd_train(
    cfg: &RunConfigFile,
    out_dir: &Path,
    resume: Option<&Path>,
    progress: &mut dyn Write,
) -> Result<TrainOutcome> {
    let (mut params, mut state, mut vocab) = (None, Default::default(), None);
    if let Some(path) = resume {
        let (p, meta) = checkpoint::load(path)?;
        if resumable(&meta.config) != resumable(cfg) {
            return Err(CliError::Config(format!(
                "{}: run configuration differs from the checkpoint",
                path.display()
            )));
        }
        params = Some(p);
        state = meta.trainer_state();
        vocab = Some(meta.vocabulary());
    }
    let (train_set, _, _) = split_dataset(cfg, vocab.as_ref())?;
    let vocabulary = Vocabulary::of(&train_set);
    let run = cfg.run_config(vocabulary.subgroups.len(), vocabulary.domains.len())?;
    let mut trainer = match params {
        Some(p) => Trainer::resume(&train_set, run.clone(), p, state)?,
        None => Trainer::new(&train_set, run.clone())?,
    };

    let history_path = out_dir.join(HISTORY_FILE);
    let mut log = match resume {
        Some(_) if history_path.exists() => {
            history::truncate(&crate::read_to_string(&history_path)?, state.iteration)
        }
        _ => history::header(&vocabulary.subgroups),
    };
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let save = |t: &Trainer, log: &str| -> Result<()> {
        checkpoint::save(
            &ckpt_path,
            t.params(),
            &CheckpointMeta::new(cfg, t.state(), &vocabulary),
        )?;
        crate::write_file(&history_path, log)
    };

    let mut clock = WallClock(Instant::now());
    let k = vocabulary.subgroups.len();
    let mut epoch_sums = (0.0, 0.0, 0usize);
    loop {
        let Some(row) = trainer.step(&mut clock)? else {
            break;
        };
        log += &history::row(row, k);
        let (epoch, wall) = (row.epoch, row.wall_time);
        epoch_sums = (
            epoch_sums.0 + row.l_dis,
            epoch_sums.1 + row.l_fair,
            epoch_sums.2 + 1,
        );
        let state = trainer.state();
        if state.epoch != epoch || trainer.is_finished() {
            let n = epoch_sums.2 as f64;
            writeln!(
                progress,
                "epoch {epoch}: l_dis={:.6} l_fair={:.6}",
                epoch_sums.0 / n,
                epoch_sums.1 / n
            )
            .map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
            eprintln!("epoch {epoch} done after {wall:.1}s");
            epoch_sums = (0.0, 0.0, 0);
        }
        if run
            .checkpoint_every
            .is_some_and(|c| state.iteration % c == 0)
            && !trainer.is_finished()
        {
            save(&trainer, &log)?;
        }
    }
    save(&trainer, &log)?;
    let (params, _, _) = trainer.into_parts();
    Ok(TrainOutcome {
        params,
        run,
        vocabulary,
    })
}

/// Evaluates `params` on `dataset`, scoring with the head of the run's mode.
pub fn evaluate(
    run: &TrainRunConfig,
    params: &ParameterStore,
    dataset: &Dataset,
    threshold: f64,
) -> Result<MetricsReport> {
    let model = Model::new(run.model.clone())?;
    model.check_params(params)?;
    let predictions = predict(&model, params, dataset, run.mode, threshold)?;
    Ok(MetricsReport::compute(&predictions)?)
}

/// Loads the evaluation set for a checkpoint: `data` if given, else the
/// configured holdout.
fn eval_dataset(meta: &CheckpointMeta, data_path: Option<&Path>) -> Result<(Dataset, String)> {
    let vocab = meta.vocabulary();
    match data_path {
        Some(p) => {
            let name = p
                .file_stem()
                .map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned());
            Ok((
                data::load_csv(p, meta.config.dataset.image(), Some(&vocab))?,
                name,
            ))
        }
        None => {
            let (_, test, name) = split_dataset(&meta.config, Some(&vocab))?;
            Ok((test, name.to_string()))
        }
    }
}

fn run_config_of(meta: &CheckpointMeta) -> Result<TrainRunConfig> {
    meta.config
        .run_config(meta.subgroups.len(), meta.domains.len())
}

pub fn cmd_eval(
    ckpt: &Path,
    data_path: Option<&Path>,
    out_dir: &Path,
    threshold: Option<f64>,
) -> Result<MetricsReport> {
    let (params, meta) = checkpoint::load(ckpt)?;
    let run = run_config_of(&meta)?;
    let (dataset, name) = eval_dataset(&meta, data_path)?;
    let threshold = threshold.unwrap_or(meta.config.eval.threshold);
    let report = evaluate(&run, &params, &dataset, threshold)?;
    let named = NamedReport {
        dataset: &name,
        method: run.mode.name(),
        report: &report,
        subgroups: &meta.subgroups,
    };
    crate::write_file(&out_dir.join("report.txt"), named.text(&meta.config))?;
    crate::write_file(
        &out_dir.join("metrics.tsv"),
        format!("{}{}", report::METRICS_HEADER, named.metric_rows()),
    )?;
    crate::write_file(&out_dir.join("subgroups.tsv"), named.subgroup_tsv())?;
    Ok(report)
}

/// Sets one loss hyperparameter by its config key.
pub fn set_loss_param(cfg: &mut RunConfigFile, param: &str, value: f64) -> Result<()> {
    let l = &mut cfg.loss;
    let slot = match param {
        "lambda" => &mut l.lambda,
        "gamma" => &mut l.gamma,
        "alpha" => &mut l.alpha,
        "alpha_prime" => &mut l.alpha_prime,
        "rho1" => &mut l.rho1,
        "rho2" => &mut l.rho2,
        "rho3" => &mut l.rho3,
        "rho4" => &mut l.rho4,
        "b" => &mut l.b,
        "delta" => &mut l.delta,
        "beta" => &mut l.beta,
        other => return Err(CliError::Usage(format!("cannot sweep `{other}`"))),
    };
    *slot = value;
    Ok(())
}

/// Trains and evaluates one model per value, one row each. A failing value
/// is marked in its row and the sweep moves on.
pub fn cmd_sweep(
    cfg: &RunConfigFile,
    param: &str,
    values: &[f64],
    out_dir: &Path,
) -> Result<String> {
    if values.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value".into()));
    }
    set_loss_param(&mut cfg.clone(), param, values[0])?;
    let mut table = format!("{param}{}", &report::SWEEP_HEADER["value".len()..]);
    for &v in values {
        let mut c = cfg.clone();
        set_loss_param(&mut c, param, v)?;
        let run_dir = out_dir.join(format!("{param}_{v}"));
        let outcome = cmd_train(&c, &run_dir, None, &mut std::io::sink()).and_then(|t| {
            let (_, test, _) = split_dataset(&c, Some(&t.vocabulary))?;
            evaluate(&t.run, &t.params, &test, c.eval.threshold)
        });
        table += &report::sweep_row(v, &outcome.map_err(|e| e.to_string()));
    }
    crate::write_file(&out_dir.join("sweep.tsv"), &table)?;
    Ok(table)
}

#[derive(Clone, Copy, Debug)]
pub struct LandscapeArgs {
    pub extent: f64,
    pub resolution: usize,
    pub samples: usize,
    pub seed: u64,
}

/// Slices the scoring loss around a checkpoint along two seeded
/// filter-normalized directions, over the first `samples` evaluation images.
pub fn cmd_landscape(
    ckpt: &Path,
    data_path: Option<&Path>,
    out: &Path,
    args: LandscapeArgs,
) -> Result<LandscapeGrid> {
    let (params, meta) = checkpoint::load(ckpt)?;
    let run = run_config_of(&meta)?;
    let (dataset, _) = eval_dataset(&meta, data_path)?;
    if args.samples == 0 {
        return Err(CliError::Usage(
            "landscape needs at least one sample".into(),
        ));
    }
    let indices: Vec<usize> = (0..args.samples.min(dataset.len())).collect();
    let model = Model::new(run.model.clone())?;
    model.check_params(&params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let dir1 = filter_normalized_direction(&params, &mut rng);
    let dir2 = filter_normalized_direction(&params, &mut rng);
    let grid = loss_landscape_slice(
        &model,
        &params,
        &dataset,
        &indices,
        run.mode,
        &dir1,
        &dir2,
        args.extent,
        args.resolution,
    )?;
    crate::write_file(out, crate::landscape::write_grid(&grid, args.seed))?;
    Ok(grid)
}

/// Reads a config file, or the defaults when no path is given.
pub fn load_config(path: Option<&PathBuf>) -> Result<RunConfigFile> {
    match path {
        Some(p) => RunConfigFile::load(p),
        None => Ok(RunConfigFile::default()),
    }
}
