//! Run specifications and the experiment matrix: combiner ablation, GN16
//! ablation, baselines, `rho` curves, single runs and timing reports.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::sigmoid;
use crate::data::{generate_synthetic, load_dataset, test_set, three_fold_splits, training_set, FoldSplit, Sample, Subject};
use crate::error::{Error, Result};
use crate::metrics::MeanStd;
use crate::norm::{cascade_groups, Combiner, NormConfig, NormKind};
use crate::scalar::{DType, Scalar};
use crate::train::{median, select_best_lr, train_and_score, TrainLog, LR_GRID};
use crate::unet::{UNetConfig, UNetModel};

/// Number of sites listed in a `rho` curve selection file.
pub const RHO_SELECTION: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Experiment {
    CombinerAblation,
    Gn16Ablation,
    Baselines,
    RhoCurves,
    Single,
    /// The three table experiments sharing one cell cache.
    All,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::CombinerAblation => "combiner-ablation",
            Experiment::Gn16Ablation => "gn16-ablation",
            Experiment::Baselines => "baselines",
            Experiment::RhoCurves => "rho-curves",
            Experiment::Single => "single",
            Experiment::All => "all",
        }
    }

    pub fn is_table(self) -> bool {
        matches!(
            self,
            Experiment::CombinerAblation | Experiment::Gn16Ablation | Experiment::Baselines | Experiment::All
        )
    }

    /// Rows of a table experiment as `(label, method)`.
    pub fn rows(self) -> Vec<(&'static str, NormKind)> {
        match self {
            Experiment::CombinerAblation => vec![
                ("Clip", NormKind::Mix(Combiner::Clip)),
                ("Sigmoid", NormKind::Mix(Combiner::Sigmoid)),
                ("Softmax", NormKind::Mix(Combiner::Softmax)),
            ],
            Experiment::Gn16Ablation => vec![
                ("without GN16", NormKind::Mix(Combiner::Sigmoid)),
                ("with GN16", NormKind::Iln),
            ],
            Experiment::Baselines => vec![
                ("None", NormKind::None),
                ("IN", NormKind::Instance),
                ("LN", NormKind::Layer),
                ("GN4", NormKind::Group(4)),
                ("ILN", NormKind::Iln),
            ],
            _ => Vec::new(),
        }
    }

    /// The table experiments this one produces.
    pub fn tables(self) -> Vec<Experiment> {
        match self {
            Experiment::All => vec![Experiment::CombinerAblation, Experiment::Gn16Ablation, Experiment::Baselines],
            e if e.is_table() => vec![e],
            _ => Vec::new(),
        }
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Experiment::CombinerAblation,
            Experiment::Gn16Ablation,
            Experiment::Baselines,
            Experiment::RhoCurves,
            Experiment::Single,
            Experiment::All,
        ]
        .into_iter()
        .find(|e| e.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown experiment `{s}`")))
    }
}

/// Where the images come from and how training images are augmented.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub subjects: usize,
    pub images_per_subject: usize,
    pub size: usize,
    pub rotation_range: f64,
    pub rotation_step: f64,
    /// Read this directory instead of generating synthetic data.
    pub data_dir: Option<PathBuf>,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            subjects: 9,
            images_per_subject: 10,
            size: 64,
            rotation_range: 30.0,
            rotation_step: 10.0,
            data_dir: None,
        }
    }
}

/// Every recognized spec key with a one-line description. Keys are written
/// `key = value` in spec files and `--key value` on the command line.
pub const SPEC_KEYS: &[(&str, &str)] = &[
    ("experiment", "combiner-ablation | gn16-ablation | baselines | rho-curves | single | all"),
    ("norm", "none | in | ln | gnN | bn | iln | mix-clip | mix-sigmoid | mix-softmax | mix"),
    ("combiner", "clip | sigmoid | softmax (with norm=mix or no norm)"),
    ("fold", "1 | 2 | 3 | all"),
    ("lr", "comma-separated learning rates (default 1.5,1.0,0.5,0.1,0.05)"),
    ("seed", "integer seed (required)"),
    ("subjects", "number of synthetic subjects"),
    ("images-per-subject", "synthetic images per subject"),
    ("size", "synthetic image side, a multiple of 16"),
    ("rotation-range", "augmentation range in degrees (±)"),
    ("rotation-step", "augmentation step in degrees"),
    ("data-dir", "dataset directory to ingest instead of generating"),
    ("out", "output directory"),
    ("workers", "worker threads for independent runs"),
    ("strict-gn", "true to reject channel counts the GN16 stage cannot divide"),
    ("eps", "normalization epsilon"),
    ("dtype", "f32 | f64"),
];

/// A validated experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub experiment: Experiment,
    /// The method for `single` and `rho-curves`. `single` keeps the model
    /// of the best rate; with one rate it is exactly one training run.
    pub norm: NormKind,
    /// `None` means all three folds.
    pub fold: Option<usize>,
    pub lrs: Vec<f64>,
    pub seed: u64,
    pub data: DataSpec,
    pub out: PathBuf,
    pub workers: usize,
    pub strict_gn: bool,
    pub eps: f64,
    pub dtype: DType,
}

/// Parses `key = value` lines; `#` starts a comment. Underscores in keys
/// are read as hyphens.
pub fn parse_spec_text(text: &str) -> Result<IndexMap<String, String>> {
    let mut map = IndexMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got `{raw}`", n + 1)))?;
        map.insert(k.trim().replace('_', "-"), v.trim().to_string());
    }
    Ok(map)
}

fn parse_num<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got `{v}`"))),
    }
}

impl RunSpec {
    pub fn parse(text: &str) -> Result<RunSpec> {
        RunSpec::from_map(&parse_spec_text(text)?)
    }

    pub fn from_map(map: &IndexMap<String, String>) -> Result<RunSpec> {
        if let Some(k) = map.keys().find(|k| !SPEC_KEYS.iter().any(|(known, _)| known == k)) {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        let get = |k: &str| map.get(k).map(String::as_str);
        let experiment: Experiment = get("experiment").unwrap_or("single").parse()?;
        let seed = get("seed")
            .ok_or_else(|| Error::Config("seed is required".into()))
            .and_then(|v| parse_num::<u64>("seed", v))?;

        let combiner = get("combiner").map(str::parse::<Combiner>).transpose()?;
        let norm = match (get("norm"), combiner) {
            (None, None) => None,
            (None | Some("mix"), Some(c)) => Some(NormKind::Mix(c)),
            (Some("mix"), None) => return Err(Error::Config("norm=mix needs a combiner".into())),
            (Some(n), None) => Some(n.parse::<NormKind>()?),
            (Some(n), Some(c)) => {
                return Err(Error::Config(format!("combiner={} only applies to norm=mix, not {n}", c.name())))
            }
        };
        if experiment.is_table() {
            if let Some(n) = norm {
                return Err(Error::Config(format!(
                    "experiment {} fixes its own methods; norm {n} is not allowed",
                    experiment.name()
                )));
            }
        }
        let norm = norm.unwrap_or(NormKind::Iln);
        if experiment == Experiment::RhoCurves && !matches!(
            norm,
            NormKind::Iln | NormKind::Mix(Combiner::Sigmoid) | NormKind::Mix(Combiner::Softmax)
        ) {
            return Err(Error::Config(format!(
                "rho-curves plots sigmoid(rho) and needs iln, mix-sigmoid or mix-softmax, not {norm}"
            )));
        }

        let fold = match get("fold") {
            None if experiment.is_table() => None,
            None => Some(1),
            Some("all") if !experiment.is_table() => {
                return Err(Error::Config(format!("experiment {} runs a single fold", experiment.name())))
            }
            Some("all") => None,
            Some(v) => {
                let f: usize = parse_num("fold", v)?;
                if !(1..=3).contains(&f) {
                    return Err(Error::Config(format!("fold must be 1, 2, 3 or all, got {f}")));
                }
                Some(f)
            }
        };

        let lrs: Vec<f64> = match get("lr") {
            None => LR_GRID.to_vec(),
            Some(v) => v
                .split(',')
                .map(|x| parse_num::<f64>("lr", x.trim()))
                .collect::<Result<_>>()?,
        };
        if lrs.is_empty() || lrs.iter().any(|&lr| !(lr > 0.0) || !lr.is_finite()) {
            return Err(Error::Config(format!("learning rates must be positive, got {lrs:?}")));
        }

        let defaults = DataSpec::default();
        let data = DataSpec {
            subjects: get("subjects").map(|v| parse_num("subjects", v)).transpose()?.unwrap_or(defaults.subjects),
            images_per_subject: get("images-per-subject")
                .map(|v| parse_num("images-per-subject", v))
                .transpose()?
                .unwrap_or(defaults.images_per_subject),
            size: get("size").map(|v| parse_num("size", v)).transpose()?.unwrap_or(defaults.size),
            rotation_range: get("rotation-range")
                .map(|v| parse_num("rotation-range", v))
                .transpose()?
                .unwrap_or(defaults.rotation_range),
            rotation_step: get("rotation-step")
                .map(|v| parse_num("rotation-step", v))
                .transpose()?
                .unwrap_or(defaults.rotation_step),
            data_dir: get("data-dir").map(PathBuf::from),
        };
        if data.data_dir.is_none() {
            if data.size == 0 || data.size % 16 != 0 {
                return Err(Error::Config(format!("size {} is not a positive multiple of 16", data.size)));
            }
            if data.subjects < 3 || data.images_per_subject == 0 {
                return Err(Error::Config("need at least 3 subjects and 1 image per subject".into()));
            }
        }
        crate::data::rotation_angles(data.rotation_range, data.rotation_step)?;

        let workers = get("workers").map(|v| parse_num("workers", v)).transpose()?.unwrap_or(1usize);
        if workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        let strict_gn = get("strict-gn").map(|v| parse_bool("strict-gn", v)).transpose()?.unwrap_or(false);
        let eps = get("eps").map(|v| parse_num("eps", v)).transpose()?.unwrap_or(crate::norm::DEFAULT_EPS);
        let dtype = match get("dtype").unwrap_or("f32") {
            "f32" => DType::F32,
            "f64" => DType::F64,
            other => return Err(Error::Config(format!("dtype must be f32 or f64, got `{other}`"))),
        };
        let spec = RunSpec {
            experiment,
            norm,
            fold,
            lrs,
            seed,
            data,
            out: PathBuf::from(get("out").unwrap_or("results")),
            workers,
            strict_gn,
            eps,
            dtype,
        };
        for kind in spec.methods() {
            let config = spec.unet_config(kind);
            config.norm.validate()?;
            if kind == NormKind::Iln {
                for level in 0..=config.depth {
                    cascade_groups(config.base_channels << level, strict_gn)?;
                }
            }
        }
        Ok(spec)
    }

    /// Methods this spec trains, in table order without repeats.
    pub fn methods(&self) -> Vec<NormKind> {
        if !self.experiment.is_table() {
            return vec![self.norm];
        }
        let mut out = Vec::new();
        for table in self.experiment.tables() {
            for (_, kind) in table.rows() {
                if !out.contains(&kind) {
                    out.push(kind);
                }
            }
        }
        out
    }

    pub fn folds(&self) -> Vec<usize> {
        match self.fold {
            Some(f) => vec![f],
            None => vec![1, 2, 3],
        }
    }

    pub fn unet_config(&self, kind: NormKind) -> UNetConfig {
        UNetConfig::standard(NormConfig {
            kind,
            eps: self.eps,
            strict_groups: self.strict_gn,
        })
    }

    /// The spec as `key = value` lines, readable by [`RunSpec::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "experiment = {}", self.experiment.name());
        if !self.experiment.is_table() {
            let _ = writeln!(s, "norm = {}", self.norm);
        }
        match self.fold {
            Some(f) => {
                let _ = writeln!(s, "fold = {f}");
            }
            None => {
                let _ = writeln!(s, "fold = all");
            }
        }
        let lrs: Vec<String> = self.lrs.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "lr = {}", lrs.join(","));
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "subjects = {}", self.data.subjects);
        let _ = writeln!(s, "images-per-subject = {}", self.data.images_per_subject);
        let _ = writeln!(s, "size = {}", self.data.size);
        let _ = writeln!(s, "rotation-range = {}", self.data.rotation_range);
        let _ = writeln!(s, "rotation-step = {}", self.data.rotation_step);
        if let Some(d) = &self.data.data_dir {
            let _ = writeln!(s, "data-dir = {}", d.display());
        }
        let _ = writeln!(s, "out = {}", self.out.display());
        let _ = writeln!(s, "workers = {}", self.workers);
        let _ = writeln!(s, "strict-gn = {}", self.strict_gn);
        let _ = writeln!(s, "eps = {}", self.eps);
        let _ = writeln!(s, "dtype = {}", if self.dtype == DType::F32 { "f32" } else { "f64" });
        s
    }
}

/// Subjects plus their fold assignment.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub subjects: Vec<Subject<T>>,
    pub splits: Vec<FoldSplit>,
}

impl<T: Scalar> Dataset<T> {
    /// Loads `data-dir` when given, otherwise generates the synthetic set and
    /// splits it with the spec's seed.
    pub fn prepare(spec: &RunSpec) -> Result<Dataset<T>> {
        let (subjects, splits) = match &spec.data.data_dir {
            Some(dir) => load_dataset(dir)?,
            None => {
                let subjects =
                    generate_synthetic(spec.data.subjects, spec.data.images_per_subject, spec.data.size, spec.seed)?;
                let ids: Vec<usize> = subjects.iter().map(|s| s.id).collect();
                let splits = three_fold_splits(&ids, spec.seed)?;
                (subjects, splits)
            }
        };
        check_splits(&subjects, &splits)?;
        Ok(Dataset { subjects, splits })
    }

    pub fn split(&self, fold: usize) -> Result<&FoldSplit> {
        self.splits
            .iter()
            .find(|s| s.fold == fold)
            .ok_or_else(|| Error::Config(format!("dataset has no fold {fold}")))
    }
}

/// Train and test sets must partition the subjects.
pub fn check_splits<T>(subjects: &[Subject<T>], splits: &[FoldSplit]) -> Result<()> {
    let mut all: Vec<usize> = subjects.iter().map(|s| s.id).collect();
    all.sort_unstable();
    for split in splits {
        if let Some(id) = split.test.iter().find(|id| split.train.contains(id)) {
            return Err(Error::Config(format!("fold {}: subject {id} is in both train and test", split.fold)));
        }
        let mut union: Vec<usize> = split.train.iter().chain(&split.test).copied().collect();
        union.sort_unstable();
        if union != all {
            return Err(Error::Config(format!("fold {} does not cover every subject exactly once", split.fold)));
        }
    }
    Ok(())
}

/// One learning rate of a cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LrOutcome {
    pub lr: f64,
    /// `None` for failed runs.
    pub score: Option<MeanStd>,
    pub per_image: Vec<f64>,
    pub failure: Option<String>,
    pub seconds: f64,
    pub iterations: usize,
}

/// A method on a fold after its learning-rate sweep.
#[derive(Debug, Clone)]
pub struct Cell<T> {
    pub kind: NormKind,
    pub fold: usize,
    /// Grid order.
    pub outcomes: Vec<LrOutcome>,
    pub best: usize,
    pub best_log: TrainLog,
    pub best_model: Option<UNetModel<T>>,
}

impl<T> Cell<T> {
    pub fn best_lr(&self) -> f64 {
        self.outcomes[self.best].lr
    }

    pub fn score(&self) -> MeanStd {
        self.outcomes[self.best].score.expect("best run has a score")
    }

    /// Final logged `rho` of every site of the selected run.
    pub fn final_rho(&self) -> Vec<(String, f64)> {
        self.best_log
            .rho
            .iter()
            .filter_map(|(k, v)| v.last().map(|&r| (k.clone(), r)))
            .collect()
    }

    pub fn seconds(&self) -> f64 {
        self.outcomes.iter().map(|o| o.seconds).sum()
    }
}

/// Runs every `(method, fold)` cell over the spec's learning-rate grid. All
/// `(method, fold, lr)` jobs share one worker pool; results are assembled
/// in job order. With `keep_models`, the selected model of each cell is
/// kept.
pub fn run_cells<T: Scalar>(
    spec: &RunSpec,
    dataset: &Dataset<T>,
    keys: &[(NormKind, usize)],
    keep_models: bool,
) -> Result<Vec<Cell<T>>> {
    let mut sets: HashMap<usize, (Vec<Sample<T>>, Vec<Sample<T>>)> = HashMap::new();
    for &(_, fold) in keys {
        if let std::collections::hash_map::Entry::Vacant(e) = sets.entry(fold) {
            let split = dataset.split(fold)?;
            e.insert((
                training_set(&dataset.subjects, split, spec.data.rotation_range, spec.data.rotation_step)?,
                test_set(&dataset.subjects, split)?,
            ));
        }
    }
    let jobs: Vec<(usize, f64)> = (0..keys.len())
        .flat_map(|k| spec.lrs.iter().map(move |&lr| (k, lr)))
        .collect();
    let total = jobs.len();
    let job = |(idx, &(k, lr)): (usize, &(usize, f64))| -> Result<(LrOutcome, TrainLog, UNetModel<T>)> {
        let (kind, fold) = keys[k];
        let (train, test) = &sets[&fold];
        let model = UNetModel::init(spec.unet_config(kind), spec.seed)?;
        let run = train_and_score(model, train, test, lr, spec.seed.wrapping_add(fold as u64))?;
        let outcome = LrOutcome {
            lr,
            score: run.score.as_ref().map(|s| s.summary),
            per_image: run.score.as_ref().map(|s| s.per_image.clone()).unwrap_or_default(),
            failure: run.log.failure.clone(),
            seconds: run.log.total_seconds,
            iterations: run.log.iterations(),
        };
        log::info!(
            "[{}/{total}] {kind} SYN-{fold} lr {lr}: {} ({:.1}s)",
            idx + 1,
            outcome.score.map_or_else(|| "failed".to_string(), |s| s.to_string()),
            outcome.seconds
        );
        Ok((outcome, run.log, run.model))
    };
    let results: Vec<(LrOutcome, TrainLog, UNetModel<T>)> = if spec.workers <= 1 {
        jobs.iter().enumerate().map(job).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(spec.workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| jobs.par_iter().enumerate().map(job).collect::<Result<_>>())?
    };

    let per_cell = spec.lrs.len();
    let mut cells = Vec::with_capacity(keys.len());
    let mut results = results.into_iter();
    for &(kind, fold) in keys {
        let chunk: Vec<_> = results.by_ref().take(per_cell).collect();
        let pairs: Vec<(f64, Option<f64>)> = chunk.iter().map(|(o, _, _)| (o.lr, o.score.map(|s| s.mean))).collect();
        let best = select_best_lr(&pairs).ok_or_else(|| {
            let reasons: Vec<String> = chunk
                .iter()
                .map(|(o, _, _)| format!("lr {}: {}", o.lr, o.failure.as_deref().unwrap_or("unknown")))
                .collect();
            Error::AllRunsFailed(format!("{kind} SYN-{fold}: {}", reasons.join("; ")))
        })?;
        let mut best_log = TrainLog::default();
        let mut best_model = None;
        let mut outcomes = Vec::with_capacity(per_cell);
        for (i, (o, log, model)) in chunk.into_iter().enumerate() {
            if i == best {
                best_log = log;
                if keep_models {
                    best_model = Some(model);
                }
            }
            outcomes.push(o);
        }
        cells.push(Cell {
            kind,
            fold,
            outcomes,
            best,
            best_log,
            best_model,
        });
    }
    Ok(cells)
}

/// `mean±std` rows of one table experiment, with one column per fold.
pub fn render_table<T>(experiment: Experiment, cells: &[Cell<T>], spec: &RunSpec) -> String {
    let mut s = String::from("method,SYN-1,SYN-2,SYN-3\n");
    for (label, kind) in experiment.rows() {
        s.push_str(label);
        for fold in 1..=3 {
            s.push(',');
            match cells.iter().find(|c| c.kind == kind && c.fold == fold) {
                Some(c) => s.push_str(&c.score().to_string()),
                None => s.push('-'),
            }
        }
        s.push('\n');
    }
    s.push_str("\n# provenance\n");
    for line in spec.to_text().lines() {
        let _ = writeln!(s, "# {line}");
    }
    for (label, kind) in experiment.rows() {
        for c in cells.iter().filter(|c| c.kind == kind) {
            let failed: Vec<String> = c
                .outcomes
                .iter()
                .filter(|o| o.score.is_none())
                .map(|o| o.lr.to_string())
                .collect();
            let _ = writeln!(
                s,
                "# {label} SYN-{}: lr={} wall={:.1}s failed_lrs=[{}]",
                c.fold,
                c.best_lr(),
                c.seconds(),
                failed.join(",")
            );
        }
    }
    s
}

/// Every run at full precision:
/// `method,fold,lr,selected,mean_dsc,std_dsc,per_image_dsc,status,iterations,seconds`.
pub fn render_runs<T>(cells: &[Cell<T>]) -> String {
    let mut s = String::from("method,fold,lr,selected,mean_dsc,std_dsc,per_image_dsc,status,iterations,seconds\n");
    for c in cells {
        for (i, o) in c.outcomes.iter().enumerate() {
            let (mean, std) = o.score.map_or((String::new(), String::new()), |m| (m.mean.to_string(), m.std.to_string()));
            let per: Vec<String> = o.per_image.iter().map(|v| v.to_string()).collect();
            let status = o.failure.as_deref().map_or("ok".to_string(), |f| format!("failed: {}", f.replace(',', ";")));
            let _ = writeln!(
                s,
                "{},{},{},{},{mean},{std},{},{status},{},{:.3}",
                c.kind,
                c.fold,
                o.lr,
                i == c.best,
                per.join(" "),
                o.iterations,
                o.seconds
            );
        }
    }
    s
}

/// What an experiment produced.
#[derive(Debug, Clone)]
pub struct ExperimentOutput<T> {
    pub cells: Vec<Cell<T>>,
    pub files: Vec<PathBuf>,
    pub rho_selection: Vec<String>,
}

fn write_file(path: PathBuf, text: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, text)?;
    files.push(path);
    Ok(())
}

fn write_log(path: PathBuf, log: &TrainLog, files: &mut Vec<PathBuf>) -> Result<()> {
    log.write_csv(BufWriter::new(fs::File::create(&path)?))?;
    files.push(path);
    Ok(())
}

/// Runs `spec` end to end and writes its outputs under `spec.out`.
pub fn run_experiment<T: Scalar>(spec: &RunSpec) -> Result<ExperimentOutput<T>> {
    let dataset = Dataset::<T>::prepare(spec)?;
    run_experiment_on(spec, &dataset)
}

/// [`run_experiment`] on an already prepared dataset.
pub fn run_experiment_on<T: Scalar>(spec: &RunSpec, dataset: &Dataset<T>) -> Result<ExperimentOutput<T>> {
    let start = Instant::now();
    fs::create_dir_all(&spec.out)?;
    let keys: Vec<(NormKind, usize)> = spec
        .methods()
        .into_iter()
        .flat_map(|k| spec.folds().into_iter().map(move |f| (k, f)))
        .collect();
    let keep = spec.experiment == Experiment::Single;
    let cells = run_cells(spec, dataset, &keys, keep)?;
    let mut files = Vec::new();
    let mut rho_selection = Vec::new();
    write_file(spec.out.join("spec.txt"), &spec.to_text(), &mut files)?;
    write_file(spec.out.join("runs.csv"), &render_runs(&cells), &mut files)?;
    for table in spec.experiment.tables() {
        write_file(
            spec.out.join(format!("{}.csv", table.name())),
            &render_table(table, &cells, spec),
            &mut files,
        )?;
    }
    let logs = spec.out.join("logs");
    fs::create_dir_all(&logs)?;
    for c in &cells {
        write_log(logs.join(format!("{}_SYN-{}.csv", c.kind, c.fold)), &c.best_log, &mut files)?;
    }
    match spec.experiment {
        Experiment::Single => {
            if let Some(model) = &cells[0].best_model {
                let path = spec.out.join("model.nkck");
                model.save(BufWriter::new(fs::File::create(&path)?))?;
                files.push(path);
            }
        }
        Experiment::RhoCurves => {
            let (written, selection) = emit_rho_curves(&cells[0].best_log, &spec.out.join("rho_curves"), spec.seed)?;
            files.extend(written);
            rho_selection = selection;
        }
        _ => {}
    }
    log::info!("{} finished in {:.1}s", spec.experiment.name(), start.elapsed().as_secs_f64());
    Ok(ExperimentOutput {
        cells,
        files,
        rho_selection,
    })
}

/// One `iteration,sigmoid_rho` file per site plus `selection.txt` naming
/// eight sites drawn with `seed` (in layout order). Returns the written
/// paths and the selection.
pub fn emit_rho_curves(log: &TrainLog, dir: &Path, seed: u64) -> Result<(Vec<PathBuf>, Vec<String>)> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for (site, series) in &log.rho {
        let mut s = String::from("iteration,sigmoid_rho\n");
        for (i, &rho) in series.iter().enumerate() {
            let _ = writeln!(s, "{},{}", i + 1, sigmoid(rho));
        }
        write_file(dir.join(format!("{site}.csv")), &s, &mut files)?;
    }
    let sites: Vec<&String> = log.rho.keys().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<&String> = sites.choose_multiple(&mut rng, RHO_SELECTION.min(sites.len())).copied().collect();
    chosen.sort_by_key(|name| sites.iter().position(|s| s == name));
    let selection: Vec<String> = chosen.into_iter().cloned().collect();
    let mut text = String::new();
    for s in &selection {
        let _ = writeln!(text, "{s}");
    }
    write_file(dir.join("selection.txt"), &text, &mut files)?;
    Ok((files, selection))
}

/// Parameter and timing comparison of ILN against IN.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingReport {
    pub rho_delta: usize,
    pub parameter_delta: usize,
    pub iln_seconds_per_200: Vec<f64>,
    pub in_seconds_per_200: Vec<f64>,
}

impl TimingReport {
    pub fn iln_median(&self) -> f64 {
        median(&self.iln_seconds_per_200)
    }

    pub fn in_median(&self) -> f64 {
        median(&self.in_seconds_per_200)
    }
}

impl std::fmt::Display for TimingReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "rho parameters ILN - IN: {}", self.rho_delta)?;
        writeln!(f, "all parameters ILN - IN: {}", self.parameter_delta)?;
        writeln!(f, "seconds per 200 iterations, IN (median of {}): {:.3}", self.in_seconds_per_200.len(), self.in_median())?;
        write!(f, "seconds per 200 iterations, ILN (median of {}): {:.3}", self.iln_seconds_per_200.len(), self.iln_median())
    }
}

/// Counts parameters of ILN and IN networks and times `repeats` training
/// runs of each (alternating) on the first fold at the smallest grid rate.
pub fn report_timing<T: Scalar>(spec: &RunSpec, dataset: &Dataset<T>, repeats: usize) -> Result<TimingReport> {
    let iln = UNetModel::<T>::init(spec.unet_config(NormKind::Iln), spec.seed)?;
    let inorm = UNetModel::<T>::init(spec.unet_config(NormKind::Instance), spec.seed)?;
    let split = dataset.split(spec.fold.unwrap_or(1))?;
    let train = training_set(&dataset.subjects, split, spec.data.rotation_range, spec.data.rotation_step)?;
    let lr = spec.lrs.iter().copied().fold(f64::INFINITY, f64::min);
    let config = crate::train::TrainConfig::new(lr, spec.seed);
    let mut report = TimingReport {
        rho_delta: iln.rho_count() - inorm.rho_count(),
        parameter_delta: iln.num_parameters() - inorm.num_parameters(),
        iln_seconds_per_200: Vec::new(),
        in_seconds_per_200: Vec::new(),
    };
    for _ in 0..repeats {
        let mut m = inorm.clone();
        report
            .in_seconds_per_200
            .push(crate::train::run_training(&mut m, &train, &config)?.seconds_per_200());
        let mut m = iln.clone();
        report
            .iln_seconds_per_200
            .push(crate::train::run_training(&mut m, &train, &config)?.seconds_per_200());
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_defaults_and_comments() {
        let spec = RunSpec::parse("# demo\nexperiment = baselines\nseed = 7 # trailing\n").unwrap();
        assert_eq!(spec.experiment, Experiment::Baselines);
        assert_eq!(spec.seed, 7);
        assert_eq!(spec.lrs, LR_GRID);
        assert_eq!(spec.folds(), [1, 2, 3]);
        assert_eq!(spec.data, DataSpec::default());
        assert_eq!(spec.methods().len(), 5);
    }

    #[test]
    fn seed_required() {
        assert!(matches!(RunSpec::parse("experiment = single\nlr = 0.1"), Err(Error::Config(_))));
    }

    #[test]
    fn table_experiments_fix_their_methods() {
        let err = RunSpec::parse("experiment = combiner-ablation\nnorm = bn\nseed = 1").unwrap_err();
        assert!(err.to_string().contains("bn"), "{err}");
        assert!(RunSpec::parse("experiment = baselines\ncombiner = clip\nseed = 1").is_err());
    }

    #[test]
    fn combiner_key() {
        let spec = RunSpec::parse("norm = mix\ncombiner = softmax\nlr = 0.1\nseed = 1").unwrap();
        assert_eq!(spec.norm, NormKind::Mix(Combiner::Softmax));
        assert!(RunSpec::parse("norm = in\ncombiner = clip\nlr = 0.1\nseed = 1").is_err());
        assert!(RunSpec::parse("norm = mix\nlr = 0.1\nseed = 1").is_err());
    }

    #[test]
    fn single_defaults() {
        let spec = RunSpec::parse("experiment = single\nlr = 0.5\nseed = 1").unwrap();
        assert_eq!(spec.folds(), [1]);
        assert_eq!(spec.methods(), [NormKind::Iln]);
        assert_eq!(spec.lrs, [0.5]);
        assert!(RunSpec::parse("experiment = single\nfold = all\nseed = 1").is_err());
    }

    #[test]
    fn rejects_bad_values() {
        for bad in [
            "seed = 1\nfold = 4\nlr = 0.1",
            "seed = 1\nlr = -0.1",
            "seed = 1\nlr = 0.1\nsize = 40",
            "seed = 1\nlr = 0.1\nrotation-step = 7",
            "seed = 1\nlr = 0.1\nworkers = 0",
            "seed = 1\nlr = 0.1\ndtype = f16",
            "seed = 1\nlr = 0.1\ncolour = blue",
            "seed = 1\nlr = 0.1\nnorm = gn0",
            "seed = 1\nexperiment = rho-curves\nnorm = mix-clip",
            "seed = x\nlr = 0.1",
            "seed = 1\nlr = 0.1\neps = 0",
            "seed 1",
        ] {
            assert!(RunSpec::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn underscores_and_roundtrip() {
        let spec = RunSpec::parse("experiment = all\nimages_per_subject = 2\nseed = 3\nfold = 2\nstrict_gn = true").unwrap();
        assert_eq!(spec.data.images_per_subject, 2);
        assert_eq!(spec.methods().len(), 8);
        assert!(spec.strict_gn);
        assert_eq!(RunSpec::parse(&spec.to_text()).unwrap(), spec);
    }

    #[test]
    fn rows_match_tables() {
        assert_eq!(Experiment::CombinerAblation.rows().len(), 3);
        assert_eq!(Experiment::Gn16Ablation.rows().len(), 2);
        assert_eq!(Experiment::Baselines.rows().len(), 5);
        assert_eq!(Experiment::All.tables().len(), 3);
        assert!(Experiment::RhoCurves.rows().is_empty());
    }

    #[test]
    fn split_leakage_detected() {
        let subjects = generate_synthetic::<f32>(3, 1, 16, 0).unwrap();
        let mut splits = three_fold_splits(&[0, 1, 2], 0).unwrap();
        check_splits(&subjects, &splits).unwrap();
        let leaked = splits[0].test[0];
        splits[0].train.push(leaked);
        assert!(check_splits(&subjects, &splits).is_err());
    }

    #[test]
    fn rho_curve_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = TrainLog::default();
        for i in 0..22 {
            log.rho.insert(format!("site{i}"), vec![0.5, -3.0, 4.0]);
        }
        let (files, sel) = emit_rho_curves(&log, dir.path(), 5).unwrap();
        assert_eq!(files.len(), 23);
        assert_eq!(sel.len(), 8);
        let (_, again) = emit_rho_curves(&log, dir.path(), 5).unwrap();
        assert_eq!(sel, again);
        let text = fs::read_to_string(dir.path().join("site3.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iteration,sigmoid_rho");
        assert_eq!(lines.len(), 4);
        for l in &lines[1..] {
            let v: f64 = l.split(',').nth(1).unwrap().parse().unwrap();
            assert!(v > 0.0 && v < 1.0);
        }
    }
}
