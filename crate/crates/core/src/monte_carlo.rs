//! Metropolis sampling of `W(S)^2` and the energy and gradient estimators.
//!
//! Moves exchange the spins of a nearest-neighbour pair, so a chain stays in
//! the magnetization sector of its starting configuration. The production
//! sweep visits every nearest-neighbour bond once in a fixed order; each
//! visit is a symmetric exchange kernel with acceptance `min(1, (W'/W)^2)`,
//! and amplitude ratios come from the cached boundary strips.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::contraction::{amplitude, single_layer_environments, Amplitude, ContractionCache};
use crate::ed::{apply_full_space, SectorBasis, SectorHamiltonian};
use crate::error::{PepsError, Result};
use crate::lattice::{build_bonds, classical_energy, neel_config, Bond, LatticeSpec, Site, SpinConfig};
use crate::peps::PepsState;
use crate::tensor::DenseTensor;

/// Sampling parameters. `sweeps` counts measured sweeps per walker.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McParams {
    pub sweeps: usize,
    pub equilibration_sweeps: usize,
    pub walkers: usize,
    pub dc: usize,
    pub seed: u64,
    pub bin_size: usize,
    /// Sector of the starting configurations (total Sz).
    pub sector_sz: i64,
    /// Use cached boundary strips for ratios; otherwise every amplitude is a
    /// fresh contraction.
    pub cached: bool,
}

impl McParams {
    /// 10% equilibration and bins of up to 100 sweeps.
    pub fn new(sweeps: usize, walkers: usize, dc: usize, seed: u64) -> Self {
        let bin_size = (1..=100.min(sweeps.max(1))).rev().find(|b| sweeps % b == 0).unwrap_or(1);
        McParams {
            sweeps,
            equilibration_sweeps: (sweeps / 10).max(1),
            walkers,
            dc,
            seed,
            bin_size,
            sector_sz: 0,
            cached: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sweeps == 0 || self.walkers == 0 || self.bin_size == 0 || self.dc == 0 {
            return Err(PepsError::Config(format!("sweeps, walkers, bin_size and Dc must be positive: {self:?}")));
        }
        if self.sweeps % self.bin_size != 0 {
            return Err(PepsError::Config(format!(
                "bin size {} does not divide {} sweeps",
                self.bin_size, self.sweeps
            )));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.walkers * self.sweeps
    }
}

/// Mean with a standard error from bin averages.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimator {
    pub mean: f64,
    pub std_error: f64,
    pub n_bins: usize,
}

impl Estimator {
    /// Bins of equal weight; one bin gives a zero error bar.
    pub fn from_bins(bins: &[f64]) -> Self {
        let n = bins.len();
        let mean = bins.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let var = bins.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Estimator { mean, std_error, n_bins: n }
    }
}

/// `dE/dA` per site with jackknife error bars, shaped like the state.
#[derive(Clone, Debug)]
pub struct GradientEstimate {
    pub gradient: Vec<DenseTensor>,
    pub std_error: Vec<DenseTensor>,
    pub energy: Estimator,
}

/// Nearest-neighbour pairs with opposite spins.
pub fn exchangeable_pairs(config: &SpinConfig) -> Vec<(Site, Site)> {
    let (rows, cols) = (config.rows(), config.cols());
    let mut out = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            for (nr, nc) in [(r, c + 1), (r + 1, c)] {
                if nr < rows && nc < cols && config.get((r, c)) != config.get((nr, nc)) {
                    out.push(((r, c), (nr, nc)));
                }
            }
        }
    }
    out
}

/// A proposed exchange together with the number of exchangeable pairs before
/// and after, which enter the Hastings ratio.
#[derive(Clone, Debug)]
pub struct Proposal {
    pub config: SpinConfig,
    pub sites: (Site, Site),
    pub forward_pairs: usize,
    pub reverse_pairs: usize,
}

/// Exchange a uniformly chosen nearest-neighbour pair of opposite spins.
pub fn propose_exchange<R: Rng + ?Sized>(config: &SpinConfig, rng: &mut R) -> Result<Proposal> {
    let pairs = exchangeable_pairs(config);
    if pairs.is_empty() {
        return Err(PepsError::InvalidArgument("no exchangeable pair: configuration is polarized".into()));
    }
    let (a, b) = pairs[rng.gen_range(0..pairs.len())];
    let next = config.swapped(a, b);
    let reverse_pairs = exchangeable_pairs(&next).len();
    Ok(Proposal { config: next, sites: (a, b), forward_pairs: pairs.len(), reverse_pairs })
}

/// One Metropolis-Hastings step with fresh amplitude evaluations. The pair
/// choice is uniform among exchangeable pairs, so the acceptance carries the
/// factor `n(S) / n(S')`.
pub fn metropolis_step<R: Rng + ?Sized>(
    state: &PepsState,
    config: &SpinConfig,
    dc: usize,
    rng: &mut R,
) -> Result<(SpinConfig, bool)> {
    let w = amplitude(state, config, dc)?;
    if w.is_zero() {
        return Err(PepsError::ZeroAmplitude(format!("W = 0 at {config}")));
    }
    let p = propose_exchange(config, rng)?;
    let u: f64 = rng.gen();
    let w_new = match amplitude(state, &p.config, dc) {
        Ok(a) => a,
        Err(_) => return Ok((config.clone(), false)),
    };
    let ratio = w_new.ratio(&w);
    let accept = ratio * ratio * p.forward_pairs as f64 / p.reverse_pairs as f64;
    if u < accept {
        Ok((p.config, true))
    } else {
        Ok((config.clone(), false))
    }
}

/// Local energy `E(S) = sum_S' <S'|H|S> W(S')/W(S)` with every amplitude
/// contracted from scratch.
pub fn local_energy(state: &PepsState, config: &SpinConfig, spec: &LatticeSpec, dc: usize) -> Result<f64> {
    let w = amplitude(state, config, dc)?;
    if w.is_zero() {
        return Err(PepsError::ZeroAmplitude(format!("W = 0 at {config}")));
    }
    let mut e = classical_energy(spec, config)?;
    for b in build_bonds(spec)?.all() {
        if b.coupling != 0.0 && config.get(b.site_a) != config.get(b.site_b) {
            let w2 = amplitude(state, &config.swapped(b.site_a, b.site_b), dc)?;
            e += 0.5 * b.coupling * w2.ratio(&w);
        }
    }
    Ok(e)
}

/// A configuration in the requested sector: Néel, then down spins flipped
/// up (or the reverse) in row-major order.
pub fn sector_start(spec: &LatticeSpec, sz: i64) -> Result<SpinConfig> {
    let mut cfg = neel_config(spec)?;
    let target = 2 * sz;
    if target.abs() > spec.n_sites() as i64 || (spec.n_sites() as i64 - target) % 2 != 0 {
        return Err(PepsError::InvalidArgument(format!("no Sz = {sz} sector on {} sites", spec.n_sites())));
    }
    let (from, to) = if target > cfg.magnetization() { (-1, 1) } else { (1, -1) };
    for i in 0..spec.n_sites() {
        if cfg.magnetization() == target {
            break;
        }
        let site = spec.site(i);
        if cfg.get(site) == from {
            cfg.set(site, to);
        }
    }
    Ok(cfg)
}

/// Bonds grouped by the strip that evaluates their exchange ratio.
#[derive(Clone, Debug)]
struct BondPlan {
    /// per row: horizontal bonds as (col, coupling)
    row: Vec<Vec<(usize, f64)>>,
    /// per row pair `(r, r+1)`: bonds touching both rows
    pair: Vec<Vec<Bond>>,
}

impl BondPlan {
    fn new(spec: &LatticeSpec) -> Result<Self> {
        let bonds = build_bonds(spec)?;
        let mut row = vec![Vec::new(); spec.rows];
        let mut pair = vec![Vec::new(); spec.rows.saturating_sub(1)];
        for b in bonds.all().filter(|b| b.coupling != 0.0) {
            let (r0, r1) = b.row_span();
            if r0 == r1 {
                row[r0].push((b.site_a.1.min(b.site_b.1), b.coupling));
            } else {
                pair[r0].push(*b);
            }
        }
        Ok(BondPlan { row, pair })
    }
}

/// One Markov chain with its cached boundary stacks.
struct Walker<'a> {
    cache: ContractionCache<'a>,
    rng: ChaCha8Rng,
    proposed: u64,
    accepted: u64,
}

impl<'a> Walker<'a> {
    fn new(state: &'a PepsState, config: SpinConfig, dc: usize, rng: ChaCha8Rng) -> Result<Self> {
        let cache = ContractionCache::new(state, config, dc)?;
        Ok(Walker { cache, rng, proposed: 0, accepted: 0 })
    }

    fn config(&self) -> &SpinConfig {
        self.cache.config()
    }

    fn try_accept(&mut self, new: Amplitude, old: Amplitude) -> bool {
        self.proposed += 1;
        let u: f64 = self.rng.gen();
        let ratio = new.ratio(&old);
        if u < ratio * ratio {
            self.accepted += 1;
            true
        } else {
            false
        }
    }

    /// Visit horizontal bonds of each row, then the vertical bonds below it.
    fn sweep(&mut self) -> Result<()> {
        let (rows, cols) = (self.cache.state().rows(), self.cache.state().cols());
        for r in 0..rows {
            if cols > 1 {
                let mut strip = self.cache.row_strip(r)?;
                let mut w = strip.amplitude()?;
                for c in 0..cols - 1 {
                    let (a, b) = ((r, c), (r, c + 1));
                    let (sa, sb) = (self.config().get(a), self.config().get(b));
                    if sa == sb {
                        continue;
                    }
                    let ta = self.cache.site_tensor(a, sb);
                    let tb = self.cache.site_tensor(b, sa);
                    let w_new = strip.amplitude_with(c, &[vec![ta.clone()], vec![tb.clone()]])?;
                    if self.try_accept(w_new, w) {
                        strip.set_site(0, c, ta);
                        strip.set_site(0, c + 1, tb);
                        self.cache.set_spin(a, sb);
                        self.cache.set_spin(b, sa);
                        w = w_new;
                    }
                }
            }
            if r + 1 < rows {
                let mut strip = self.cache.pair_strip(r)?;
                let mut w = strip.amplitude()?;
                for c in 0..cols {
                    let (a, b) = ((r, c), (r + 1, c));
                    let (sa, sb) = (self.config().get(a), self.config().get(b));
                    if sa == sb {
                        continue;
                    }
                    let ta = self.cache.site_tensor(a, sb);
                    let tb = self.cache.site_tensor(b, sa);
                    let w_new = strip.amplitude_with(c, &[vec![ta.clone(), tb.clone()]])?;
                    if self.try_accept(w_new, w) {
                        strip.set_site(0, c, ta);
                        strip.set_site(1, c, tb);
                        self.cache.set_spin(a, sb);
                        self.cache.set_spin(b, sa);
                        w = w_new;
                    }
                }
            }
        }
        Ok(())
    }

    /// The same sweep with fresh amplitudes and symmetric bond-scan kernels.
    fn sweep_uncached(&mut self) -> Result<()> {
        let state = self.cache.state();
        let dc = self.cache.dc();
        let (rows, cols) = (state.rows(), state.cols());
        let mut order = Vec::new();
        for r in 0..rows {
            for c in 0..cols.saturating_sub(1) {
                order.push(((r, c), (r, c + 1)));
            }
            if r + 1 < rows {
                for c in 0..cols {
                    order.push(((r, c), (r + 1, c)));
                }
            }
        }
        let mut config = self.config().clone();
        let mut w = amplitude(state, &config, dc)?;
        for (a, b) in order {
            if config.get(a) == config.get(b) {
                continue;
            }
            let next = config.swapped(a, b);
            let w_new = amplitude(state, &next, dc)?;
            if self.try_accept(w_new, w) {
                config = next;
                w = w_new;
            }
        }
        let mut cache = ContractionCache::new(state, config, dc)?;
        std::mem::swap(&mut self.cache, &mut cache);
        Ok(())
    }

    /// Local energy and, optionally, `B/W` for every site.
    fn measure(&mut self, spec: &LatticeSpec, plan: &BondPlan, want_grad: bool) -> Result<(f64, Vec<DenseTensor>)> {
        let (rows, cols) = (spec.rows, spec.cols);
        let mut e = classical_energy(spec, self.config())?;
        let mut deltas = Vec::new();
        for r in 0..rows {
            let mut strip = self.cache.row_strip(r)?;
            let w = strip.amplitude()?;
            if w.is_zero() {
                return Err(PepsError::ZeroAmplitude(format!("W = 0 at {}", self.config())));
            }
            for &(c, coupling) in &plan.row[r] {
                let (a, b) = ((r, c), (r, c + 1));
                let (sa, sb) = (self.config().get(a), self.config().get(b));
                if sa != sb {
                    let ta = self.cache.site_tensor(a, sb);
                    let tb = self.cache.site_tensor(b, sa);
                    e += 0.5 * coupling * strip.amplitude_with(c, &[vec![ta], vec![tb]])?.ratio(&w);
                }
            }
            if want_grad {
                for c in 0..cols {
                    let (env, log) = strip.environment(c)?;
                    let factor = f64::from(w.sign) * (log - w.log_magnitude).exp();
                    deltas.push(env.scaled(factor));
                }
            }
        }
        for r in 0..rows.saturating_sub(1) {
            if plan.pair[r].is_empty() {
                continue;
            }
            let mut strip = self.cache.pair_strip(r)?;
            let w = strip.amplitude()?;
            for b in &plan.pair[r] {
                let (sa, sb) = (self.config().get(b.site_a), self.config().get(b.site_b));
                if sa == sb {
                    continue;
                }
                let c0 = b.site_a.1.min(b.site_b.1);
                let c1 = b.site_a.1.max(b.site_b.1);
                let mut columns: Vec<Vec<DenseTensor>> = (c0..=c1)
                    .map(|c| vec![self.cache.fixed_row(r)[c].clone(), self.cache.fixed_row(r + 1)[c].clone()])
                    .collect();
                for (site, spin) in [(b.site_a, sb), (b.site_b, sa)] {
                    columns[site.1 - c0][site.0 - r] = self.cache.site_tensor(site, spin);
                }
                e += 0.5 * b.coupling * strip.amplitude_with(c0, &columns)?.ratio(&w);
            }
        }
        Ok((e, deltas))
    }

    fn measure_uncached(&mut self, spec: &LatticeSpec, want_grad: bool) -> Result<(f64, Vec<DenseTensor>)> {
        let state = self.cache.state();
        let e = local_energy(state, self.config(), spec, self.cache.dc())?;
        let deltas = if want_grad {
            let envs = single_layer_environments(state, self.config(), self.cache.dc())?;
            (0..spec.n_sites()).map(|i| envs.log_derivative(i, spec.cols)).collect()
        } else {
            Vec::new()
        };
        Ok((e, deltas))
    }
}

/// Sums over one bin of samples.
#[derive(Clone, Debug)]
struct Bin {
    n: usize,
    sum_e: f64,
    sum_d: Vec<f64>,
    sum_de: Vec<f64>,
    accepted: u64,
    proposed: u64,
}

/// Flat parameter layout matching the state's tensors.
struct Layout {
    offsets: Vec<usize>,
    total: usize,
}

impl Layout {
    fn new(state: &PepsState) -> Self {
        let mut offsets = Vec::with_capacity(state.tensors().len());
        let mut total = 0;
        for t in state.tensors() {
            offsets.push(total);
            total += t.len();
        }
        Layout { offsets, total }
    }
}

/// Sampling diagnostics per bin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinRecord {
    pub walker: usize,
    pub bin: usize,
    pub energy: f64,
    pub acceptance: f64,
}

/// Everything one sampling run produces.
#[derive(Clone, Debug)]
pub struct McRun {
    pub energy: Estimator,
    pub gradient: Option<GradientEstimate>,
    pub acceptance: f64,
    pub bins: Vec<BinRecord>,
    /// Final configuration of each walker, for continuing the chains.
    pub configs: Vec<SpinConfig>,
}

impl McRun {
    /// CSV with columns `walker,bin,energy,acceptance`.
    pub fn write_diagnostics<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "walker,bin,energy,acceptance")?;
        for b in &self.bins {
            writeln!(w, "{},{},{:.12},{:.6}", b.walker, b.bin, b.energy, b.acceptance)?;
        }
        Ok(())
    }
}

fn walker_rng(seed: u64, walker: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(walker as u64);
    rng
}

fn run_walker(
    state: &PepsState,
    params: &McParams,
    plan: &BondPlan,
    layout: &Layout,
    start: SpinConfig,
    walker: usize,
    want_grad: bool,
) -> Result<(Vec<Bin>, SpinConfig)> {
    let spec = state.spec();
    let mut wk = Walker::new(state, start, params.dc, walker_rng(params.seed, walker))?;
    let sweep = |wk: &mut Walker<'_>| if params.cached { wk.sweep() } else { wk.sweep_uncached() };
    for _ in 0..params.equilibration_sweeps {
        sweep(&mut wk)?;
    }
    let n_bins = params.sweeps / params.bin_size;
    let grad_len = if want_grad { layout.total } else { 0 };
    let mut bins = Vec::with_capacity(n_bins);
    for _ in 0..n_bins {
        let mut bin = Bin {
            n: 0,
            sum_e: 0.0,
            sum_d: vec![0.0; grad_len],
            sum_de: vec![0.0; grad_len],
            accepted: 0,
            proposed: 0,
        };
        let (acc0, prop0) = (wk.accepted, wk.proposed);
        for _ in 0..params.bin_size {
            sweep(&mut wk)?;
            let (e, deltas) =
                if params.cached { wk.measure(spec, plan, want_grad)? } else { wk.measure_uncached(spec, want_grad)? };
            if !e.is_finite() {
                return Err(PepsError::NonFinite(format!("local energy at {}", wk.config())));
            }
            bin.n += 1;
            bin.sum_e += e;
            for (i, delta) in deltas.iter().enumerate() {
                let s = wk.config().hilbert_index(spec.site(i));
                let base = layout.offsets[i];
                for (k, &d) in delta.data().iter().enumerate() {
                    let at = base + 2 * k + s;
                    bin.sum_d[at] += d;
                    bin.sum_de[at] += d * e;
                }
            }
        }
        bin.accepted = wk.accepted - acc0;
        bin.proposed = wk.proposed - prop0;
        bins.push(bin);
    }
    Ok((bins, wk.config().clone()))
}

/// Run all walkers. `starts` continues earlier chains; otherwise every walker
/// starts from the sector's reference configuration.
pub fn run_sampling(
    state: &PepsState,
    params: &McParams,
    starts: Option<&[SpinConfig]>,
    want_grad: bool,
) -> Result<McRun> {
    params.validate()?;
    let spec = state.spec();
    let plan = BondPlan::new(spec)?;
    let layout = Layout::new(state);
    let starts: Vec<SpinConfig> = match starts {
        Some(s) if s.len() == params.walkers => s.to_vec(),
        Some(s) => {
            return Err(PepsError::InvalidArgument(format!(
                "{} start configurations for {} walkers",
                s.len(),
                params.walkers
            )))
        }
        None => vec![sector_start(spec, params.sector_sz)?; params.walkers],
    };
    let job = |w: usize| run_walker(state, params, &plan, &layout, starts[w].clone(), w, want_grad);
    #[cfg(feature = "parallel")]
    let results: Vec<Result<(Vec<Bin>, SpinConfig)>> = {
        use rayon::prelude::*;
        (0..params.walkers).into_par_iter().map(job).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<(Vec<Bin>, SpinConfig)>> = (0..params.walkers).map(job).collect();

    let mut all_bins = Vec::new();
    let mut records = Vec::new();
    let mut configs = Vec::new();
    for (w, res) in results.into_iter().enumerate() {
        let (bins, cfg) = res.map_err(|e| PepsError::InvalidArgument(format!("walker {w}: {e}")))?;
        for (k, b) in bins.iter().enumerate() {
            records.push(BinRecord {
                walker: w,
                bin: k,
                energy: b.sum_e / b.n as f64,
                acceptance: if b.proposed > 0 { b.accepted as f64 / b.proposed as f64 } else { 0.0 },
            });
        }
        all_bins.extend(bins);
        configs.push(cfg);
    }
    let bin_means: Vec<f64> = all_bins.iter().map(|b| b.sum_e / b.n as f64).collect();
    let energy = Estimator::from_bins(&bin_means);
    let (acc, prop) = all_bins.iter().fold((0, 0), |(a, p), b| (a + b.accepted, p + b.proposed));
    let gradient = want_grad.then(|| assemble_gradient(state, &layout, &all_bins, energy));
    Ok(McRun {
        energy,
        gradient,
        acceptance: if prop > 0 { acc as f64 / prop as f64 } else { 0.0 },
        bins: records,
        configs,
    })
}

/// `2<D E> - 2<D><E>` from bin sums, with leave-one-bin-out jackknife errors.
fn assemble_gradient(state: &PepsState, layout: &Layout, bins: &[Bin], energy: Estimator) -> GradientEstimate {
    let n_total: usize = bins.iter().map(|b| b.n).sum();
    let e_total: f64 = bins.iter().map(|b| b.sum_e).sum();
    let mut d_total = vec![0.0; layout.total];
    let mut de_total = vec![0.0; layout.total];
    for b in bins {
        for i in 0..layout.total {
            d_total[i] += b.sum_d[i];
            de_total[i] += b.sum_de[i];
        }
    }
    let grad = |n: f64, e: f64, d: f64, de: f64| 2.0 * de / n - 2.0 * (d / n) * (e / n);
    let nt = n_total as f64;
    let full: Vec<f64> = (0..layout.total).map(|i| grad(nt, e_total, d_total[i], de_total[i])).collect();
    let k = bins.len();
    let mut err = vec![0.0; layout.total];
    if k > 1 {
        let mut mean_jk = vec![0.0; layout.total];
        let mut sq_jk = vec![0.0; layout.total];
        for b in bins {
            let n = nt - b.n as f64;
            let e = e_total - b.sum_e;
            for i in 0..layout.total {
                let g = grad(n, e, d_total[i] - b.sum_d[i], de_total[i] - b.sum_de[i]);
                mean_jk[i] += g;
                sq_jk[i] += g * g;
            }
        }
        let kf = k as f64;
        for i in 0..layout.total {
            let m = mean_jk[i] / kf;
            let var = (sq_jk[i] / kf - m * m).max(0.0);
            err[i] = ((kf - 1.0) * var).sqrt();
        }
    }
    let shape = |flat: &[f64]| -> Vec<DenseTensor> {
        state
            .tensors()
            .iter()
            .zip(&layout.offsets)
            .map(|(t, &o)| DenseTensor::new(t.dims().to_vec(), flat[o..o + t.len()].to_vec()).expect("layout"))
            .collect()
    };
    GradientEstimate { gradient: shape(&full), std_error: shape(&err), energy }
}

/// Energy estimate; see [`run_sampling`].
pub fn sample_energy(state: &PepsState, params: &McParams) -> Result<Estimator> {
    Ok(run_sampling(state, params, None, false)?.energy)
}

/// Gradient estimate; see [`run_sampling`].
pub fn sample_gradient(state: &PepsState, params: &McParams) -> Result<GradientEstimate> {
    Ok(run_sampling(state, params, None, true)?.gradient.expect("gradient requested"))
}

/// Run the chains and evaluate `observe` after every measured sweep. Returns
/// the bin averages of the observed vectors, walkers in order.
pub fn sample_observable<F>(state: &PepsState, params: &McParams, observe: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut ContractionCache<'_>) -> Result<Vec<f64>> + Sync,
{
    params.validate()?;
    let start = sector_start(state.spec(), params.sector_sz)?;
    let job = |w: usize| -> Result<Vec<Vec<f64>>> {
        let mut wk = Walker::new(state, start.clone(), params.dc, walker_rng(params.seed, w))?;
        let sweep = |wk: &mut Walker<'_>| if params.cached { wk.sweep() } else { wk.sweep_uncached() };
        for _ in 0..params.equilibration_sweeps {
            sweep(&mut wk)?;
        }
        let mut bins = Vec::with_capacity(params.sweeps / params.bin_size);
        for _ in 0..params.sweeps / params.bin_size {
            let mut acc: Vec<f64> = Vec::new();
            for _ in 0..params.bin_size {
                sweep(&mut wk)?;
                let v = observe(&mut wk.cache)?;
                if acc.is_empty() {
                    acc = vec![0.0; v.len()];
                }
                if v.len() != acc.len() {
                    return Err(PepsError::Shape("observable changed length between samples".into()));
                }
                acc.iter_mut().zip(&v).for_each(|(a, x)| *a += x);
            }
            acc.iter_mut().for_each(|a| *a /= params.bin_size as f64);
            bins.push(acc);
        }
        Ok(bins)
    };
    #[cfg(feature = "parallel")]
    let results: Vec<Result<Vec<Vec<f64>>>> = {
        use rayon::prelude::*;
        (0..params.walkers).into_par_iter().map(job).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<Vec<Vec<f64>>>> = (0..params.walkers).map(job).collect();
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Amplitudes of every configuration of a sector, in basis order.
pub fn sector_amplitudes(state: &PepsState, basis: &SectorBasis, dc: usize) -> Result<Vec<f64>> {
    let spec = state.spec();
    let job = |&bits: &u64| amplitude(state, &SpinConfig::from_bits(spec.rows, spec.cols, bits), dc).map(|a| a.value());
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        basis.states().par_iter().map(job).collect()
    }
    #[cfg(not(feature = "parallel"))]
    basis.states().iter().map(job).collect()
}

/// `<Psi|H|Psi> / <Psi|Psi>` restricted to one sector, by enumerating every
/// amplitude at cutoff `dc`.
pub fn enumerated_energy(state: &PepsState, dc: usize, sector_sz: i64) -> Result<f64> {
    let h = SectorHamiltonian::new(state.spec(), sector_sz)?;
    let v = sector_amplitudes(state, h.basis(), dc)?;
    let mut hv = vec![0.0; v.len()];
    h.apply(&v, &mut hv);
    let norm: f64 = v.iter().map(|x| x * x).sum();
    if norm == 0.0 {
        return Err(PepsError::ZeroAmplitude("state vanishes on the sector".into()));
    }
    Ok(v.iter().zip(&hv).map(|(a, b)| a * b).sum::<f64>() / norm)
}

/// `<Psi|H|Psi> / <Psi|Psi>` over the whole Hilbert space.
pub fn enumerated_energy_full(state: &PepsState, dc: usize) -> Result<f64> {
    let spec = state.spec();
    let n = spec.n_sites();
    if n > crate::ed::MAX_FULL_SPACE_SITES {
        return Err(PepsError::SizeGuard(format!("full enumeration limited to {} sites", crate::ed::MAX_FULL_SPACE_SITES)));
    }
    let bits: Vec<u64> = (0..1u64 << n).collect();
    let job = |&b: &u64| amplitude(state, &SpinConfig::from_bits(spec.rows, spec.cols, b), dc).map(|a| a.value());
    #[cfg(feature = "parallel")]
    let v: Vec<f64> = {
        use rayon::prelude::*;
        bits.par_iter().map(job).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let v: Vec<f64> = bits.iter().map(job).collect::<Result<_>>()?;
    let hv = apply_full_space(spec, &v)?;
    let norm: f64 = v.iter().map(|x| x * x).sum();
    if norm == 0.0 {
        return Err(PepsError::ZeroAmplitude("state vanishes".into()));
    }
    Ok(v.iter().zip(&hv).map(|(a, b)| a * b).sum::<f64>() / norm)
}

/// `W^2(S)/Z` over a sector, in basis order.
pub fn enumerated_distribution(state: &PepsState, dc: usize, sector_sz: i64) -> Result<(SectorBasis, Vec<f64>)> {
    let basis = SectorBasis::new(state.spec().n_sites(), sector_sz)?;
    let v = sector_amplitudes(state, &basis, dc)?;
    let z: f64 = v.iter().map(|x| x * x).sum();
    if z == 0.0 {
        return Err(PepsError::ZeroAmplitude("state vanishes on the sector".into()));
    }
    Ok((basis, v.iter().map(|x| x * x / z).collect()))
}

/// The gradient with every expectation value taken exactly over a sector.
/// Returns the per-site gradient and the energy.
pub fn enumerated_gradient(state: &PepsState, dc: usize, sector_sz: i64) -> Result<(Vec<DenseTensor>, f64)> {
    let spec = state.spec();
    let h = SectorHamiltonian::new(spec, sector_sz)?;
    let v = sector_amplitudes(state, h.basis(), dc)?;
    let mut hv = vec![0.0; v.len()];
    h.apply(&v, &mut hv);
    let z: f64 = v.iter().map(|x| x * x).sum();
    if z == 0.0 {
        return Err(PepsError::ZeroAmplitude("state vanishes on the sector".into()));
    }
    let layout = Layout::new(state);
    let mut d = vec![0.0; layout.total];
    let mut de = vec![0.0; layout.total];
    let mut mean_e = 0.0;
    for (k, &bits) in h.basis().states().iter().enumerate() {
        if v[k] == 0.0 {
            continue;
        }
        let p = v[k] * v[k] / z;
        let e = hv[k] / v[k];
        mean_e += p * e;
        let cfg = SpinConfig::from_bits(spec.rows, spec.cols, bits);
        let envs = single_layer_environments(state, &cfg, dc)?;
        for i in 0..spec.n_sites() {
            let s = cfg.hilbert_index(spec.site(i));
            let delta = envs.log_derivative(i, spec.cols);
            for (j, &x) in delta.data().iter().enumerate() {
                let at = layout.offsets[i] + 2 * j + s;
                d[at] += p * x;
                de[at] += p * x * e;
            }
        }
    }
    let grads = state
        .tensors()
        .iter()
        .zip(&layout.offsets)
        .map(|(t, &o)| {
            let data = (o..o + t.len()).map(|i| 2.0 * de[i] - 2.0 * d[i] * mean_e).collect();
            DenseTensor::new(t.dims().to_vec(), data).expect("layout")
        })
        .collect();
    Ok((grads, mean_e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::SpinConfig;

    fn random_state(rows: usize, cols: usize, d: usize, seed: u64) -> PepsState {
        PepsState::random_init(&LatticeSpec::heisenberg(rows, cols).unwrap(), d, seed).unwrap()
    }

    #[test]
    fn estimator_from_bins() {
        let e = Estimator::from_bins(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.mean, 2.5);
        assert!((e.std_error - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(Estimator::from_bins(&[7.0]).std_error, 0.0);
    }

    #[test]
    fn params_validation() {
        let p = McParams::new(250, 2, 4, 0);
        assert_eq!(p.bin_size, 50);
        p.validate().unwrap();
        let bad = McParams { bin_size: 3, ..p };
        assert!(bad.validate().is_err());
        assert_eq!(p.total_samples(), 500);
    }

    #[test]
    fn neel_pairs_on_two_by_two() {
        let spec = LatticeSpec::heisenberg(2, 2).unwrap();
        let neel = neel_config(&spec).unwrap();
        assert_eq!(exchangeable_pairs(&neel).len(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let p = propose_exchange(&neel, &mut rng).unwrap();
            assert_eq!(p.config.magnetization(), 0);
        }
        assert!(propose_exchange(&SpinConfig::all_up(2, 2), &mut rng).is_err());
    }

    #[test]
    fn equal_weight_product_state_local_energy() {
        let spec = LatticeSpec::heisenberg(2, 2).unwrap();
        let state = PepsState::product_state(&spec, &[[1.0, 1.0]; 4]).unwrap();
        let e = local_energy(&state, &neel_config(&spec).unwrap(), &spec, 4).unwrap();
        assert!((e - 1.0).abs() < 1e-14);
    }

    #[test]
    fn classical_limit_local_energy() {
        let spec = LatticeSpec::new(2, 3, 1.0, 0.5).unwrap();
        let neel = neel_config(&spec).unwrap();
        let local: Vec<[f64; 2]> =
            neel.spins().iter().map(|&s| if s > 0 { [1.0, 1e-9] } else { [1e-9, 1.0] }).collect();
        let state = PepsState::product_state(&spec, &local).unwrap();
        let e = local_energy(&state, &neel, &spec, 4).unwrap();
        assert!((e - classical_energy(&spec, &neel).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn cached_measurement_matches_fresh_amplitudes() {
        let spec = LatticeSpec::new(3, 3, 1.0, 0.6).unwrap();
        let state = PepsState::random_init(&spec, 2, 4).unwrap();
        let plan = BondPlan::new(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let spins = (0..9).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
            let cfg = SpinConfig::from_spins(3, 3, spins).unwrap();
            let mut wk = Walker::new(&state, cfg.clone(), 64, walker_rng(0, 0)).unwrap();
            let (e, d) = wk.measure(&spec, &plan, true).unwrap();
            let (e2, d2) = wk.measure_uncached(&spec, true).unwrap();
            assert!((e - e2).abs() < 1e-10 * e2.abs().max(1.0), "{e} vs {e2}");
            for (a, b) in d.iter().zip(&d2) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert!((x - y).abs() < 1e-10 * y.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn cached_and_uncached_chains_agree() {
        let state = random_state(2, 3, 2, 8);
        let mut p = McParams::new(200, 1, 64, 3);
        let a = run_sampling(&state, &p, None, false).unwrap();
        p.cached = false;
        let b = run_sampling(&state, &p, None, false).unwrap();
        assert_eq!(a.configs, b.configs);
        assert!((a.energy.mean - b.energy.mean).abs() < 1e-10);
    }

    #[test]
    fn sampling_is_deterministic() {
        let state = random_state(2, 3, 2, 2);
        let p = McParams::new(100, 3, 4, 17);
        let a = run_sampling(&state, &p, None, true).unwrap();
        let b = run_sampling(&state, &p, None, true).unwrap();
        assert_eq!(a.energy, b.energy);
        assert_eq!(a.gradient.unwrap().gradient, b.gradient.unwrap().gradient);
    }

    #[test]
    fn enumerated_energy_matches_dense_expansion() {
        let state = random_state(2, 3, 2, 5);
        let e = enumerated_energy_full(&state, 16).unwrap();
        let psi = crate::ed::expand_peps(&state).unwrap();
        let want = crate::ed::rayleigh_quotient(state.spec(), &psi, None).unwrap();
        assert!((e - want).abs() < 1e-10);
        let e0 = enumerated_energy(&state, 16, 0).unwrap();
        let want0 = crate::ed::rayleigh_quotient(state.spec(), &psi, Some(0)).unwrap();
        assert!((e0 - want0).abs() < 1e-10);
    }

    #[test]
    fn exact_gradient_is_orthogonal_to_each_tensor() {
        let state = random_state(2, 3, 2, 6);
        let (g, _) = enumerated_gradient(&state, 16, 0).unwrap();
        for (gi, a) in g.iter().zip(state.tensors()) {
            assert!(gi.dot(a).abs() < 1e-8, "{}", gi.dot(a));
        }
    }

    #[test]
    fn zero_variance_for_singlet() {
        let spec = LatticeSpec::heisenberg(2, 1).unwrap();
        // A(0) = [[1,0],[0,1]] as (d, s), A(1) = [[0,1],[-1,0]]: W(ud) = 1, W(du) = -1
        let t0 = DenseTensor::new(vec![1, 1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let t1 = DenseTensor::new(vec![1, 1, 2, 1, 2], vec![0.0, 1.0, -1.0, 0.0]).unwrap();
        let state = PepsState::from_tensors(spec, vec![t0, t1]).unwrap();
        let est = sample_energy(&state, &McParams::new(500, 2, 4, 1)).unwrap();
        assert!((est.mean + 0.75).abs() < 1e-12);
        assert!(est.std_error < 1e-10);
    }
}
