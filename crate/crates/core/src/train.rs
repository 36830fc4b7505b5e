//! Momentum SGD, the two-epoch schedule, learning-rate sweeps and training
//! logs.

use std::io::Write;
use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::{Gradients, ParamStore};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_fold, FoldScore};
use crate::scalar::Scalar;
use crate::unet::UNetModel;

pub const MOMENTUM: f64 = 0.9;
pub const LR_DIVISOR: f64 = 5.0;
pub const EPOCHS: usize = 2;
pub const LR_GRID: [f64; 5] = [1.5, 1.0, 0.5, 0.1, 0.05];

/// Velocity per parameter plus the current learning rate.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub velocity: ParamStore<T>,
    pub momentum: f64,
    pub lr: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>, lr: f64) -> Self {
        let velocity = params
            .iter()
            .map(|(k, p)| (k.clone(), crate::Tensor::zeros(p.shape())))
            .collect();
        OptimizerState {
            velocity,
            momentum: MOMENTUM,
            lr,
        }
    }
}

/// Classical momentum: `v = m*v + g`, then `p = p - lr*v`. Every gradient
/// is checked before any parameter moves.
pub fn sgd_step<T: Scalar>(params: &mut ParamStore<T>, grads: &Gradients<T>, state: &mut OptimizerState<T>) -> Result<()> {
    if !(state.lr >= 0.0) {
        return Err(Error::Config(format!("learning rate {} must be non-negative", state.lr)));
    }
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Config(format!("no gradient for parameter {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                lhs: p.shape(),
                rhs: g.shape(),
                context: "sgd_step",
            });
        }
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    let m = T::of(state.momentum);
    let lr = T::of(state.lr);
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| crate::Tensor::zeros(p.shape()));
        for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = m * *vi + gi;
        }
        for (pi, &vi) in p.data_mut().iter_mut().zip(v.data()) {
            *pi = *pi - lr * vi;
        }
    }
    Ok(())
}

/// Learning rate for 1-based `epoch`: the initial rate, divided by 5 from
/// the second epoch on.
pub fn lr_for_epoch(initial: f64, epoch: usize) -> f64 {
    if epoch >= 2 {
        initial / LR_DIVISOR
    } else {
        initial
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Drives the per-epoch shuffle.
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(lr: f64, seed: u64) -> Self {
        TrainConfig { lr, epochs: EPOCHS, seed }
    }
}

/// Per-iteration loss and `rho` of every site, plus timing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub rho: IndexMap<String, Vec<f64>>,
    pub lr_per_epoch: Vec<f64>,
    /// Wall-clock of each complete 200-iteration window.
    pub window_seconds: Vec<f64>,
    pub total_seconds: f64,
    /// Set when the run stopped early (divergence or a non-finite gradient).
    pub failure: Option<String>,
}

impl TrainLog {
    pub fn iterations(&self) -> usize {
        self.losses.len()
    }

    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }

    /// Median over complete windows, or the run's rate scaled to 200
    /// iterations when it was shorter than one window.
    pub fn seconds_per_200(&self) -> f64 {
        if self.window_seconds.is_empty() {
            return if self.losses.is_empty() {
                0.0
            } else {
                self.total_seconds * 200.0 / self.losses.len() as f64
            };
        }
        median(&self.window_seconds)
    }

    /// `iteration,loss,<site>...` with 1-based iterations.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let mut header = String::from("iteration,loss");
        for site in self.rho.keys() {
            header.push(',');
            header.push_str(site);
        }
        writeln!(out, "{header}")?;
        for (i, loss) in self.losses.iter().enumerate() {
            write!(out, "{},{}", i + 1, loss)?;
            for series in self.rho.values() {
                write!(out, ",{}", series[i])?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

pub(crate) fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Trains `model` in place with batch size 1. Divergence ends the run and is
/// reported through [`TrainLog::failure`]; malformed inputs are errors.
pub fn run_training<T: Scalar>(model: &mut UNetModel<T>, train: &[Sample<T>], config: &TrainConfig) -> Result<TrainLog> {
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if !(config.lr > 0.0) || !config.lr.is_finite() {
        return Err(Error::Config(format!("learning rate {} must be positive", config.lr)));
    }
    let mut log = TrainLog::default();
    for (site, _) in model.rho_values() {
        log.rho.insert(site, Vec::new());
    }
    let mut state = OptimizerState::new(&model.params, config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let start = Instant::now();
    let mut window = Instant::now();
    'epochs: for epoch in 1..=config.epochs {
        state.lr = lr_for_epoch(config.lr, epoch);
        log.lr_per_epoch.push(state.lr);
        order.shuffle(&mut rng);
        for &i in &order {
            let iteration = log.losses.len() + 1;
            let step = model
                .loss_and_grads(&train[i].image, &train[i].label)
                .and_then(|(loss, grads)| {
                    if !loss.is_finite() {
                        return Err(Error::Diverged { iteration, loss });
                    }
                    sgd_step(&mut model.params, &grads, &mut state)?;
                    Ok(loss)
                });
            match step {
                Ok(loss) => log.losses.push(loss),
                Err(e) if !e.is_validation() => {
                    log::warn!("run with lr {} stopped: {e}", config.lr);
                    log.failure = Some(e.to_string());
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            for (site, rho) in model.rho_values() {
                log.rho[&site].push(rho);
            }
            if log.losses.len() % 200 == 0 {
                log.window_seconds.push(window.elapsed().as_secs_f64());
                window = Instant::now();
            }
        }
    }
    log.total_seconds = start.elapsed().as_secs_f64();
    Ok(log)
}

#[derive(Debug, Clone)]
pub struct SweepRun<T> {
    pub lr: f64,
    pub log: TrainLog,
    /// `None` for failed runs.
    pub score: Option<FoldScore>,
    pub model: UNetModel<T>,
}

#[derive(Debug, Clone)]
pub struct SweepResult<T> {
    /// In grid order.
    pub runs: Vec<SweepRun<T>>,
    pub best: usize,
}

impl<T> SweepResult<T> {
    pub fn best_run(&self) -> &SweepRun<T> {
        &self.runs[self.best]
    }
}

/// Trains `model` at `lr` and scores it on `test` unless the run failed.
pub fn train_and_score<T: Scalar>(
    mut model: UNetModel<T>,
    train: &[Sample<T>],
    test: &[Sample<T>],
    lr: f64,
    seed: u64,
) -> Result<SweepRun<T>> {
    let log = run_training(&mut model, train, &TrainConfig::new(lr, seed))?;
    let score = if log.failed() {
        None
    } else {
        Some(evaluate_fold(&model, test)?)
    };
    Ok(SweepRun { lr, log, score, model })
}

/// Trains one fresh model per learning rate and keeps the one with the
/// highest mean test DSC (ties go to the smaller rate). Grid points run on
/// up to `workers` threads; results come back in grid order.
pub fn sweep<T, F>(
    factory: F,
    train: &[Sample<T>],
    test: &[Sample<T>],
    lrs: &[f64],
    seed: u64,
    workers: usize,
) -> Result<SweepResult<T>>
where
    T: Scalar,
    F: Fn() -> Result<UNetModel<T>> + Sync,
{
    if lrs.is_empty() {
        return Err(Error::Config("empty learning-rate grid".into()));
    }
    let one = |&lr: &f64| train_and_score(factory()?, train, test, lr, seed);
    let runs: Vec<SweepRun<T>> = if workers <= 1 {
        lrs.iter().map(one).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| lrs.par_iter().map(one).collect::<Result<_>>())?
    };
    let pairs: Vec<(f64, Option<f64>)> = runs.iter().map(|r| (r.lr, r.score.as_ref().map(|s| s.summary.mean))).collect();
    let best = select_best_lr(&pairs).ok_or_else(|| {
        let reasons: Vec<String> = runs
            .iter()
            .map(|r| format!("lr {}: {}", r.lr, r.log.failure.as_deref().unwrap_or("unknown")))
            .collect();
        Error::AllRunsFailed(reasons.join("; "))
    })?;
    Ok(SweepResult { runs, best })
}

/// Index of the highest mean DSC among `(lr, mean)` pairs, `None` marking a
/// failed run; ties go to the smaller rate.
pub fn select_best_lr(runs: &[(f64, Option<f64>)]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &(lr, mean)) in runs.iter().enumerate() {
        let Some(m) = mean else { continue };
        best = match best {
            None => Some((i, m)),
            Some((j, bm)) if m > bm || (m == bm && lr < runs[j].0) => Some((i, m)),
            keep => keep,
        };
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p".into(), Tensor::full(Shape::channels(1), v));
        s
    }

    #[test]
    fn one_step() {
        let mut p = store(0.0);
        let mut st = OptimizerState::new(&p, 0.1);
        sgd_step(&mut p, &store(1.0), &mut st).unwrap();
        assert_eq!(p["p"].item(), -0.1);
        assert_eq!(st.velocity["p"].item(), 1.0);
    }

    #[test]
    fn velocity_decays_geometrically() {
        let mut p = store(0.0);
        let mut st = OptimizerState::new(&p, 0.5);
        st.velocity.insert("p".into(), Tensor::full(Shape::channels(1), 1.0));
        let zero = store(0.0);
        let mut prev = 0.0;
        for k in 1..=6 {
            sgd_step(&mut p, &zero, &mut st).unwrap();
            let drift = prev - p["p"].item();
            assert!((drift - 0.5 * 0.9f64.powi(k)).abs() < 1e-15);
            prev = p["p"].item();
        }
    }

    #[test]
    fn zero_lr_is_noop_and_nan_names_param() {
        let mut p = store(2.0);
        let mut st = OptimizerState::new(&p, 0.0);
        sgd_step(&mut p, &store(3.0), &mut st).unwrap();
        assert_eq!(p["p"].item(), 2.0);
        let mut bad = ParamStore::new();
        bad.insert("p".into(), Tensor::from_parts(Shape::channels(1), vec![f64::NAN]));
        match sgd_step(&mut p, &bad, &mut st) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "p"),
            other => panic!("{other:?}"),
        }
        assert_eq!(p["p"].item(), 2.0);
    }

    #[test]
    fn linear_in_lr() {
        let step = |lr: f64| {
            let mut p = store(0.0);
            let mut st = OptimizerState::new(&p, lr);
            st.velocity.insert("p".into(), Tensor::full(Shape::channels(1), 0.5));
            sgd_step(&mut p, &store(0.25), &mut st).unwrap();
            p["p"].item()
        };
        let base = step(1.0);
        for lr in [0.5, 2.0, 4.0] {
            assert_eq!(step(lr), lr * base);
        }
    }

    #[test]
    fn schedule() {
        for lr in LR_GRID {
            assert_eq!(lr_for_epoch(lr, 1), lr);
            assert_eq!(lr_for_epoch(lr, 2), lr / 5.0);
        }
        assert_eq!(lr_for_epoch(1.5, 2), 0.3);
        assert_eq!(lr_for_epoch(0.05, 2), 0.01);
    }

    #[test]
    fn best_lr_selection() {
        assert_eq!(select_best_lr(&[(0.5, Some(0.8))]), Some(0));
        assert_eq!(select_best_lr(&[(1.5, None), (0.5, Some(0.2))]), Some(1));
        assert_eq!(select_best_lr(&[(0.5, Some(0.9)), (0.1, Some(0.9))]), Some(1));
        assert_eq!(select_best_lr(&[(0.1, Some(0.9)), (0.5, Some(0.9))]), Some(0));
        assert_eq!(select_best_lr(&[(0.1, None)]), None);
    }

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn csv_layout() {
        let mut log = TrainLog::default();
        log.losses = vec![0.7, 0.6];
        log.rho.insert("enc0.conv1".into(), vec![0.5, 0.49]);
        let mut out = Vec::new();
        log.write_csv(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "iteration,loss,enc0.conv1\n1,0.7,0.5\n2,0.6,0.49\n"
        );
    }
}
