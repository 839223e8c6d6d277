//! Stochastic sign-gradient descent.
//!
//! Each step samples the energy gradient, then moves every tensor element by
//! `-p * dt * sign(g)` with `p` drawn uniformly from `(0, 1)` per element,
//! and rescales the tensors. The step size and the sample count follow a
//! phased [`GoSchedule`].

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{PepsError, Result};
use crate::lattice::SpinConfig;
use crate::monte_carlo::{run_sampling, sector_start, GradientEstimate, McParams};
use crate::peps::PepsState;

/// How `dt` evolves within a phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepRule {
    Fixed(f64),
    /// Multiply the previous step's `dt` by the factor before every step.
    Decay(f64),
}

/// Total samples per step within a phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplesRule {
    Fixed(usize),
    /// Linear from `start` at the first step to `end` at the last.
    Ramp { start: usize, end: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GoPhase {
    pub steps: usize,
    pub step_rule: StepRule,
    pub samples_rule: SamplesRule,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GoSchedule {
    pub phases: Vec<GoPhase>,
}

/// One planned step: step size and total sample count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlannedStep {
    pub dt: f64,
    pub samples: usize,
}

impl GoSchedule {
    pub fn new(phases: Vec<GoPhase>) -> Result<Self> {
        let s = GoSchedule { phases };
        s.validate()?;
        Ok(s)
    }

    /// 30 steps at dt = 0.005 with 2000 to 5000 samples, 30 steps decaying
    /// by 0.968 at 5000 samples, 20 steps at dt = 0.001 with 20000 samples.
    pub fn desk() -> Self {
        GoSchedule::parse("30,dt=0.005,M=2000..5000; 30,decay=0.968,M=5000; 20,dt=0.001,M=20000")
            .expect("static schedule")
    }

    /// 50 steps at dt = 0.005 with 50000 to 100000 samples, 50 decaying steps
    /// ramping to 500000 samples, 20 steps at dt = 0.001 with 500000 samples.
    pub fn production() -> Self {
        GoSchedule::parse("50,dt=0.005,M=50000..100000; 50,decay=0.968,M=100000..500000; 20,dt=0.001,M=500000")
            .expect("static schedule")
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(PepsError::Config("GO schedule has no phases".into()));
        }
        for (i, p) in self.phases.iter().enumerate() {
            if p.steps == 0 {
                return Err(PepsError::Config(format!("phase {i} has no steps")));
            }
            match p.step_rule {
                StepRule::Fixed(dt) if !(dt > 0.0 && dt.is_finite()) => {
                    return Err(PepsError::Config(format!("phase {i}: dt must be positive, got {dt}")))
                }
                StepRule::Decay(f) if !(f > 0.0 && f < 1.0) => {
                    return Err(PepsError::Config(format!("phase {i}: decay factor must lie in (0,1), got {f}")))
                }
                StepRule::Decay(_) if i == 0 => {
                    return Err(PepsError::Config("the first phase needs a fixed dt".into()))
                }
                _ => {}
            }
            match p.samples_rule {
                SamplesRule::Fixed(0) | SamplesRule::Ramp { start: 0, .. } | SamplesRule::Ramp { end: 0, .. } => {
                    return Err(PepsError::Config(format!("phase {i}: sample counts must be at least 1")))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Phases separated by `;`, each `steps,dt=X` or `steps,decay=F`, then
    /// `M=N` or `M=A..B`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut phases = Vec::new();
        for part in text.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let fields: Vec<&str> = part.split(',').map(str::trim).collect();
            let bad = || PepsError::Config(format!("bad GO phase `{part}`"));
            if fields.len() != 3 {
                return Err(bad());
            }
            let steps: usize = fields[0].parse().map_err(|_| bad())?;
            let step_rule = match fields[1].split_once('=') {
                Some(("dt", v)) => StepRule::Fixed(v.parse().map_err(|_| bad())?),
                Some(("decay", v)) => StepRule::Decay(v.parse().map_err(|_| bad())?),
                _ => return Err(bad()),
            };
            let samples_rule = match fields[2].split_once('=') {
                Some(("M", v)) => match v.split_once("..") {
                    Some((a, b)) => SamplesRule::Ramp {
                        start: a.parse().map_err(|_| bad())?,
                        end: b.parse().map_err(|_| bad())?,
                    },
                    None => SamplesRule::Fixed(v.parse().map_err(|_| bad())?),
                },
                _ => return Err(bad()),
            };
            phases.push(GoPhase { steps, step_rule, samples_rule });
        }
        GoSchedule::new(phases)
    }

    /// Canonical text form, accepted by [`GoSchedule::parse`].
    pub fn to_text(&self) -> String {
        self.phases
            .iter()
            .map(|p| {
                let rule = match p.step_rule {
                    StepRule::Fixed(dt) => format!("dt={dt}"),
                    StepRule::Decay(f) => format!("decay={f}"),
                };
                let m = match p.samples_rule {
                    SamplesRule::Fixed(m) => format!("M={m}"),
                    SamplesRule::Ramp { start, end } => format!("M={start}..{end}"),
                };
                format!("{},{rule},{m}", p.steps)
            })
            .collect::<Vec<_>>()
            .join("; ")
    }

    pub fn total_steps(&self) -> usize {
        self.phases.iter().map(|p| p.steps).sum()
    }

    /// Every step of the schedule in order.
    pub fn plan(&self) -> Vec<PlannedStep> {
        let mut out = Vec::with_capacity(self.total_steps());
        let mut dt = 0.0;
        for p in &self.phases {
            for k in 0..p.steps {
                dt = match p.step_rule {
                    StepRule::Fixed(x) => x,
                    StepRule::Decay(f) => dt * f,
                };
                let samples = match p.samples_rule {
                    SamplesRule::Fixed(m) => m,
                    SamplesRule::Ramp { start, end } if p.steps > 1 => {
                        let t = k as f64 / (p.steps - 1) as f64;
                        (start as f64 + t * (end as f64 - start as f64)).round() as usize
                    }
                    SamplesRule::Ramp { start, .. } => start,
                };
                out.push(PlannedStep { dt, samples });
            }
        }
        out
    }
}

/// `A <- A - p * dt * sign(g)` elementwise, then every tensor divided by its
/// largest entry. Elements with a zero gradient are left alone and draw no
/// random number.
pub fn go_step<R: Rng + ?Sized>(state: &PepsState, gradient: &GradientEstimate, dt: f64, rng: &mut R) -> Result<PepsState> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(PepsError::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if gradient.gradient.len() != state.tensors().len() {
        return Err(PepsError::Shape(format!(
            "gradient has {} tensors, state has {}",
            gradient.gradient.len(),
            state.tensors().len()
        )));
    }
    for (i, (g, t)) in gradient.gradient.iter().zip(state.tensors()).enumerate() {
        if g.dims() != t.dims() {
            return Err(PepsError::Shape(format!("gradient {i} is {:?}, tensor is {:?}", g.dims(), t.dims())));
        }
        if g.data().iter().any(|x| !x.is_finite()) {
            return Err(PepsError::NonFinite(format!("gradient of tensor {i}")));
        }
    }
    let mut next = state.clone();
    for (t, g) in next.tensors_mut().iter_mut().zip(&gradient.gradient) {
        for (a, &gi) in t.data_mut().iter_mut().zip(g.data()) {
            if gi != 0.0 {
                let p: f64 = rng.gen();
                *a -= p * dt * gi.signum();
            }
        }
    }
    next.rescale_in_place()?;
    Ok(next)
}

/// One optimizer step as recorded in the trace. Energies are per site and
/// belong to the state before the update of that step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GoRecord {
    pub step: usize,
    pub dt: f64,
    pub samples: usize,
    pub energy: f64,
    pub std_error: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GoTrace {
    pub records: Vec<GoRecord>,
    /// Index into `records` of the lowest sampled energy.
    pub best: Option<usize>,
}

impl GoTrace {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,dt,M,energy,stderr,seconds")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{:.6e},{},{:.10},{:.3e},{:.3}",
                r.step, r.dt, r.samples, r.energy, r.std_error, r.seconds
            )?;
        }
        Ok(())
    }

    pub fn best_record(&self) -> Option<&GoRecord> {
        self.best.map(|i| &self.records[i])
    }
}

/// Seeds for step `n`: sampling uses `root + 2n`, the update draws from
/// `root + 2n + 1`.
pub fn step_seeds(root: u64, step: usize) -> (u64, u64) {
    let base = root.wrapping_add(2 * step as u64);
    (base, base.wrapping_add(1))
}

/// Run the schedule. `mc.sweeps` is ignored: each step samples the planned
/// total spread over `mc.walkers` chains, which persist across steps.
pub fn run_go(state: &PepsState, schedule: &GoSchedule, mc: &McParams) -> Result<(PepsState, GoTrace)> {
    run_go_with(state, schedule, mc, |_, _| Ok(()))
}

/// As [`run_go`], calling `on_step(record, best_state)` after every step.
pub fn run_go_with<F>(state: &PepsState, schedule: &GoSchedule, mc: &McParams, mut on_step: F) -> Result<(PepsState, GoTrace)>
where
    F: FnMut(&GoRecord, &PepsState) -> Result<()>,
{
    schedule.validate()?;
    let mut trial = *mc;
    trial.sweeps = 1;
    trial.bin_size = 1;
    trial.validate()?;
    let n_sites = state.spec().n_sites() as f64;
    let fresh = || -> Result<Vec<SpinConfig>> { Ok(vec![sector_start(state.spec(), mc.sector_sz)?; mc.walkers]) };

    let mut current = state.clone();
    current.rescale_in_place()?;
    let mut configs = fresh()?;
    let mut trace = GoTrace::default();
    let mut best: Option<(f64, PepsState)> = None;
    for (step, plan) in schedule.plan().into_iter().enumerate() {
        let clock = Instant::now();
        let (sample_seed, update_seed) = step_seeds(mc.seed, step);
        let sweeps = plan.samples.div_ceil(mc.walkers);
        let mut params = McParams::new(sweeps, mc.walkers, mc.dc, sample_seed);
        params.sector_sz = mc.sector_sz;
        params.cached = mc.cached;
        let run = match run_sampling(&current, &params, Some(&configs), true) {
            Ok(run) => run,
            Err(_) => {
                configs = fresh()?;
                run_sampling(&current, &params, Some(&configs), true)?
            }
        };
        configs = run.configs;
        let gradient = run.gradient.expect("gradient requested");
        let energy = gradient.energy.mean / n_sites;
        if best.as_ref().is_none_or(|(e, _)| energy < *e) {
            best = Some((energy, current.clone()));
            trace.best = Some(trace.records.len());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(update_seed);
        current = go_step(&current, &gradient, plan.dt, &mut rng)?;
        let record = GoRecord {
            step,
            dt: plan.dt,
            samples: params.total_samples(),
            energy,
            std_error: gradient.energy.std_error / n_sites,
            seconds: clock.elapsed().as_secs_f64(),
        };
        trace.records.push(record);
        on_step(&record, &best.as_ref().expect("set above").1)?;
    }
    let (_, best_state) = best.expect("schedule has at least one step");
    Ok((best_state, trace))
}
