use std::fs;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use indexmap::IndexMap;

use ilnorm::data::{save_dataset, Subject};
use ilnorm::experiment::{
    parse_spec_text, report_timing, run_experiment_on, Dataset, Experiment, ExperimentOutput, RunSpec, SPEC_KEYS,
};
use ilnorm::unet::{grad_check_unet, UNetConfig, UNetSteps};
use ilnorm::{DType, Error, NormConfig, Scalar};

const GRAD_CHECK_SEEDS: u64 = 5;
const GRAD_CHECK_TOLERANCE: f64 = 1e-4;
const TIMING_REPEATS: usize = 3;

fn spec_args(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("spec")
            .long("spec")
            .value_name("FILE")
            .help("key = value spec file; flags override its entries"),
    );
    SPEC_KEYS.iter().fold(cmd, |cmd, &(key, help)| {
        let arg = Arg::new(key).long(key).help(help);
        cmd.arg(if key == "strict-gn" {
            arg.action(ArgAction::SetTrue)
        } else {
            arg.value_name("VALUE")
        })
    })
}

fn cli() -> Command {
    let verbs = [
        ("generate-data", "write the synthetic dataset and its fold manifest to --out"),
        ("train", "train one method on one fold at one learning rate"),
        ("sweep", "train one method on one fold over the learning-rate grid"),
        ("experiment", "run a table experiment (default: all three tables)"),
        ("rho-curves", "train and emit per-site sigmoid(rho) trajectories"),
        ("grad-check", "finite-difference check of a one-level U-Net over 5 seeds"),
        ("report", "parameter and timing comparison of ILN against IN"),
    ];
    let mut cmd = Command::new("ilnorm")
        .about("Instance-layer normalization for U-Net segmentation")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in verbs {
        cmd = cmd.subcommand(spec_args(Command::new(name).about(about)));
    }
    cmd
}

/// Spec-file entries overridden by flags, with the verb's fixed keys.
fn spec_map(verb: &str, m: &ArgMatches) -> Result<IndexMap<String, String>, Error> {
    let mut map = match m.get_one::<String>("spec") {
        Some(path) => parse_spec_text(
            &fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read spec file {path}: {e}")))?,
        )?,
        None => IndexMap::new(),
    };
    for &(key, _) in SPEC_KEYS {
        if key == "strict-gn" {
            if m.get_flag(key) {
                map.insert(key.to_string(), "true".into());
            }
        } else if let Some(v) = m.get_one::<String>(key) {
            map.insert(key.to_string(), v.clone());
        }
    }
    let forced = match verb {
        "train" | "sweep" | "grad-check" | "report" | "generate-data" => Some("single"),
        "rho-curves" => Some("rho-curves"),
        _ => None,
    };
    if let Some(e) = forced {
        match map.get("experiment") {
            Some(given) if given != e && !matches!(verb, "grad-check" | "report" | "generate-data") => {
                return Err(Error::Config(format!("`{verb}` runs experiment {e}, not {given}")));
            }
            _ => {
                map.insert("experiment".into(), e.into());
            }
        }
    } else if !map.contains_key("experiment") {
        map.insert("experiment".into(), "all".into());
    }
    if verb == "train" {
        match map.get("lr") {
            Some(lr) if !lr.contains(',') => {}
            _ => return Err(Error::Config("train needs exactly one --lr".into())),
        }
    }
    Ok(map)
}

fn print_cells<T>(out: &ExperimentOutput<T>) {
    for c in &out.cells {
        println!("{} SYN-{} lr {}: DSC {}", c.kind, c.fold, c.best_lr(), c.score());
    }
}

fn run_typed<T: Scalar>(verb: &str, spec: &RunSpec) -> Result<(), Error> {
    match verb {
        "generate-data" => {
            let dataset = Dataset::<T>::prepare(spec)?;
            save_dataset(&spec.out, &dataset.subjects, &dataset.splits)?;
            let images: usize = dataset.subjects.iter().map(|s: &Subject<T>| s.images.len()).sum();
            println!(
                "wrote {} subjects ({images} images) and {} folds to {}",
                dataset.subjects.len(),
                dataset.splits.len(),
                spec.out.display()
            );
        }
        "report" => {
            let dataset = Dataset::<T>::prepare(spec)?;
            let report = report_timing(spec, &dataset, TIMING_REPEATS)?;
            println!("{report}");
            fs::create_dir_all(&spec.out)?;
            fs::write(spec.out.join("timing.txt"), format!("{report}\n"))?;
        }
        _ => {
            let dataset = Dataset::<T>::prepare(spec)?;
            let out = run_experiment_on::<T>(spec, &dataset)?;
            print_cells(&out);
            for table in spec.experiment.tables() {
                let path = spec.out.join(format!("{}.csv", table.name()));
                println!("\n{}:\n{}", table.name(), fs::read_to_string(path)?.split("\n\n").next().unwrap_or(""));
            }
            if spec.experiment == Experiment::RhoCurves {
                println!("selected sites: {}", out.rho_selection.join(", "));
            }
            println!("outputs in {}", spec.out.display());
        }
    }
    Ok(())
}

fn grad_check(spec: &RunSpec) -> Result<bool, Error> {
    let config = UNetConfig {
        depth: 1,
        base_channels: 4,
        in_channels: 1,
        num_classes: 2,
        norm: NormConfig {
            kind: spec.norm,
            eps: spec.eps,
            strict_groups: spec.strict_gn,
        },
    };
    let mut ok = true;
    for seed in spec.seed..spec.seed + GRAD_CHECK_SEEDS {
        let report = grad_check_unet(config, 8, seed, UNetSteps::default(), GRAD_CHECK_TOLERANCE)?;
        println!("# {} seed {seed}", spec.norm);
        print!("{report}");
        ok &= report.passed();
    }
    Ok(ok)
}

fn run(verb: &str, m: &ArgMatches) -> Result<bool, Error> {
    let spec = RunSpec::from_map(&spec_map(verb, m)?)?;
    if verb == "grad-check" {
        return grad_check(&spec);
    }
    match spec.dtype {
        DType::F32 => run_typed::<f32>(verb, &spec)?,
        DType::F64 => run_typed::<f64>(verb, &spec)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let (verb, sub) = matches.subcommand().expect("a verb is required");
    match run(verb, sub) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
