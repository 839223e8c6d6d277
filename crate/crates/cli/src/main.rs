use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use peps_core::config::RunConfig;
use peps_core::contraction::{amplitude, amplitude_bruteforce, row_absorb, single_layer_environments, BoundaryMps, Direction};
use peps_core::ed::ground_state;
use peps_core::gradient_opt::run_go_with;
use peps_core::lattice::{LatticeSpec, SpinConfig};
use peps_core::monte_carlo::{enumerated_energy, enumerated_energy_full, run_sampling, sector_start};
use peps_core::observables::{bulk_window, spin_correlation, staggered_from_correlations, window_pairs};
use peps_core::peps::PepsState;
use peps_core::simple_update::run_simple_update;

/// Largest lattice on which energies are also computed by enumeration.
const ENUMERATION_SITES: usize = 16;

#[derive(Parser)]
#[command(name = "peps", version, about = "Finite PEPS ground states of the J1-J2 model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// PEPS checkpoint to start from.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory; overrides `out` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; overrides `threads` from the config.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Exact ground-state energy by Lanczos.
    Ed,
    /// Simple update from a random state.
    Su,
    /// Sign-gradient optimization from a checkpoint, or from a fresh simple update.
    Go,
    /// Energy, spin correlations and staggered magnetization of a checkpoint.
    Measure,
    /// Amplitude W(S) of one configuration, rows of +/- separated by '/'.
    Amp { spins: String },
    /// Time amplitude, environment and row-absorption calls over (D, Dc).
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
        dims: Vec<usize>,
        /// Cutoffs to try; default D, 2D and 3D for each D.
        #[arg(long, value_delimiter = ',')]
        cutoffs: Option<Vec<usize>>,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ed => "ed",
            Command::Su => "su",
            Command::Go => "go",
            Command::Measure => "measure",
            Command::Amp { .. } => "amp",
            Command::Bench { .. } => "bench",
        }
    }
}

struct Run {
    config: RunConfig,
    out: PathBuf,
    checkpoint: Option<PathBuf>,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn mc(&self, sweeps: usize) -> peps_core::monte_carlo::McParams {
        self.config.mc_params(sweeps)
    }

    fn spec(&self) -> &LatticeSpec {
        &self.config.lattice
    }

    fn load_checkpoint(&self) -> Result<PepsState> {
        let path = self.checkpoint.as_ref().context("this command needs --checkpoint")?;
        let l = self.spec();
        let state = PepsState::load(path, l.j1, l.j2).with_context(|| format!("reading {}", path.display()))?;
        if (state.rows(), state.cols()) != (l.rows, l.cols) {
            bail!("checkpoint is {}x{}, config says {}x{}", state.rows(), state.cols(), l.rows, l.cols);
        }
        Ok(state)
    }

    fn write_manifest(&self, command: &str) -> Result<()> {
        let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let mut text = format!("# created unix={stamp}\n# command: {command}\n");
        text += &format!("# version: {} {}\n", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"));
        if let Some(c) = &self.checkpoint {
            text += &format!("# checkpoint: {}\n", c.display());
        }
        text += &self.config.to_text();
        fs::write(self.path("manifest.txt"), text)?;
        Ok(())
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut config = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::parse(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None if matches!(cli.command, Command::Amp { .. } | Command::Bench { .. }) => RunConfig::new(4, 4, 2)?,
        None => bail!("`{}` needs --config", cli.command.name()),
    };
    if let Some(t) = cli.threads {
        config.threads = t;
    }
    if let Some(o) = &cli.out {
        config.out = o.display().to_string();
    }
    if config.threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(config.threads).build_global()?;
    }
    let run = Run { out: PathBuf::from(&config.out), config, checkpoint: cli.checkpoint.clone() };
    fs::create_dir_all(&run.out).with_context(|| format!("creating {}", run.out.display()))?;
    run.write_manifest(cli.command.name())?;
    match &cli.command {
        Command::Ed => ed(&run),
        Command::Su => su(&run).map(|_| ()),
        Command::Go => go(&run),
        Command::Measure => measure(&run),
        Command::Amp { spins } => amp(&run, spins),
        Command::Bench { dims, cutoffs, repeats } => bench(&run, dims, cutoffs.as_deref(), *repeats),
    }
}

fn ed(run: &Run) -> Result<()> {
    let spec = run.spec();
    let res = ground_state(spec, run.config.sector, false, run.config.seed)?;
    let text = format!(
        "energy,energy_per_site,sector,iterations,residual\n{:.12},{:.12},{},{},{:.3e}\n",
        res.energy, res.energy_per_site, res.sz, res.iterations, res.residual
    );
    fs::write(run.path("ed.csv"), &text)?;
    println!("{}x{} j2={} sector Sz={}", spec.rows, spec.cols, spec.j2, res.sz);
    println!("energy {:.10}  per site {:.10}  ({} iterations)", res.energy, res.energy_per_site, res.iterations);
    Ok(())
}

/// Energy per site of a state: enumeration when small, sampling otherwise.
fn report_energy(run: &Run, state: &PepsState, label: &str) -> Result<Vec<(String, f64, f64)>> {
    let n = run.spec().n_sites();
    let mut rows = Vec::new();
    if n <= ENUMERATION_SITES {
        let full = enumerated_energy_full(state, run.config.dc)? / n as f64;
        let sector = enumerated_energy(state, run.config.dc, run.config.sector)? / n as f64;
        println!("{label} energy per site: {full:.8} (all sectors), {sector:.8} (Sz={})", run.config.sector);
        rows.push(("exact_all_sectors".into(), full, 0.0));
        rows.push(("exact_sector".into(), sector, 0.0));
    } else {
        let est = run_sampling(state, &run.mc(run.config.sweeps), None, false)?.energy;
        let (e, s) = (est.mean / n as f64, est.std_error / n as f64);
        println!("{label} energy per site: {e:.8} +- {s:.1e} (sampled)");
        rows.push(("sampled".into(), e, s));
    }
    Ok(rows)
}

fn su(run: &Run) -> Result<PepsState> {
    let cfg = &run.config;
    let init = PepsState::random_init(&cfg.lattice, cfg.bond_dim, cfg.seed)?;
    let (state, log) = run_simple_update(&init, &cfg.su_schedule)?;
    state.save(run.path("su.peps"))?;
    log.write_csv(create(&run.path("su_sweeps.csv"))?)?;
    if log.converged.iter().any(|c| !c) {
        eprintln!("warning: a simple-update stage hit its sweep limit");
    }
    println!("simple update: {} sweeps", log.records.len());
    report_energy(run, &state, "SU")?;
    Ok(state)
}

fn go(run: &Run) -> Result<()> {
    let start = match &run.checkpoint {
        Some(_) => run.load_checkpoint()?,
        None => su(run)?,
    };
    if start.bond_dim() > run.config.dc {
        bail!("checkpoint has D = {} above Dc = {}", start.bond_dim(), run.config.dc);
    }
    let mc = run.mc(1);
    let best_path = run.path("go_best.peps");
    let (best, trace) = run_go_with(&start, &run.config.go_schedule, &mc, |r, best| {
        best.save(&best_path)?;
        eprintln!("step {:3} dt {:.3e} M {:6} E {:.6} +- {:.1e}", r.step, r.dt, r.samples, r.energy, r.std_error);
        Ok(())
    })?;
    best.save(run.path("go.peps"))?;
    trace.write_csv(create(&run.path("go_trace.csv"))?)?;
    if let Some(b) = trace.best_record() {
        println!("best sampled energy per site {:.6} +- {:.1e} at step {}", b.energy, b.std_error, b.step);
    }
    report_energy(run, &best, "GO")?;
    Ok(())
}

fn measure(run: &Run) -> Result<()> {
    let state = run.load_checkpoint()?;
    let n = run.spec().n_sites();
    let mut rows = report_energy(run, &state, "measured")?;
    if n <= ENUMERATION_SITES {
        let est = run_sampling(&state, &run.mc(run.config.sweeps), None, false)?.energy;
        rows.push(("sampled".into(), est.mean / n as f64, est.std_error / n as f64));
    }
    let mut text = String::from("method,energy_per_site,stderr\n");
    for (m, e, s) in &rows {
        text += &format!("{m},{e:.10},{s:.3e}\n");
    }
    fs::write(run.path("energy.csv"), text)?;

    let window = bulk_window(run.spec(), run.config.margin)?;
    let corr = spin_correlation(&state, &window_pairs(&window), &run.mc(run.config.sweeps))?;
    corr.write_csv(create(&run.path("correlations.csv"))?)?;
    let mut text = String::from("margin,sites,m2s,stderr\n");
    let mut margin = run.config.margin;
    while let Ok(w) = bulk_window(run.spec(), margin) {
        let (m, s) = staggered_from_correlations(&corr, &w)?;
        text += &format!("{margin},{},{m:.10},{s:.3e}\n", w.len());
        println!("m_s^2 (margin {margin}, {} sites): {m:.6} +- {s:.1e}", w.len());
        margin += 1;
    }
    fs::write(run.path("magnetization.csv"), text)?;
    Ok(())
}

fn amp(run: &Run, spins: &str) -> Result<()> {
    let config: SpinConfig = spins.parse()?;
    let state = match &run.checkpoint {
        Some(_) => run.load_checkpoint()?,
        None => PepsState::random_init(run.spec(), run.config.bond_dim, run.config.seed)?,
    };
    let dc = run.config.dc.max(state.bond_dim());
    let w = amplitude(&state, &config, dc)?;
    println!("W(S) = {:.15e}  (Dc = {dc}, log|W| = {:.12})", w.value(), w.log_magnitude);
    match amplitude_bruteforce(&state, &config) {
        Ok(exact) => println!("brute force: {exact:.15e}"),
        Err(e) => println!("brute force skipped: {e}"),
    }
    Ok(())
}

fn bench(run: &Run, dims: &[usize], cutoffs: Option<&[usize]>, repeats: usize) -> Result<()> {
    let spec = run.spec();
    let config = sector_start(spec, 0)?;
    let repeats = repeats.max(1);
    let mut text = String::from("D,Dc,amplitude_ms,environments_ms,row_absorb_ms\n");
    for &d in dims {
        let state = PepsState::random_init(spec, d, run.config.seed)?;
        let list: Vec<usize> = cutoffs.map_or_else(|| vec![d, 2 * d, 3 * d], <[usize]>::to_vec);
        for &dc in &list {
            let time = |f: &mut dyn FnMut() -> Result<()>| -> Result<f64> {
                let t = Instant::now();
                for _ in 0..repeats {
                    f()?;
                }
                Ok(t.elapsed().as_secs_f64() * 1e3 / repeats as f64)
            };
            let amp_ms = time(&mut || Ok(amplitude(&state, &config, dc).map(|_| ())?))?;
            let env_ms = time(&mut || Ok(single_layer_environments(&state, &config, dc).map(|_| ())?))?;
            // absorb the middle row onto the boundary above it
            let mid = spec.rows / 2;
            let mut top = BoundaryMps::trivial(spec.cols);
            for r in 0..mid {
                top = row_absorb(&top, &peps_core::contraction::fixed_row(&state, &config, r), dc, Direction::Down)?;
            }
            let row = peps_core::contraction::fixed_row(&state, &config, mid);
            let absorb_ms = time(&mut || Ok(row_absorb(&top, &row, dc, Direction::Down).map(|_| ())?))?;
            println!("D={d} Dc={dc}: amplitude {amp_ms:.3} ms, environments {env_ms:.3} ms, row absorb {absorb_ms:.3} ms");
            text += &format!("{d},{dc},{amp_ms:.6},{env_ms:.6},{absorb_ms:.6}\n");
        }
    }
    fs::write(run.path("bench.csv"), text)?;
    Ok(())
}
