//! Spin correlations, staggered magnetization on bulk windows, and the
//! finite-size extrapolation of energies.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::{Matrix3, Vector3};

use crate::contraction::{Amplitude, ContractionCache, Strip};
use crate::ed::SectorBasis;
use crate::error::{PepsError, Result};
use crate::lattice::{LatticeSpec, Site, SpinConfig};
use crate::monte_carlo::{sample_observable, sector_amplitudes, Estimator, McParams};
use crate::peps::PepsState;
use crate::tensor::DenseTensor;

/// `<S_i . S_j>` for a list of site pairs.
#[derive(Clone, Debug)]
pub struct CorrelationResult {
    pub pairs: Vec<(Site, Site)>,
    pub values: Vec<Estimator>,
    /// Bin averages, `bins[k][p]` for pair `p`.
    pub bins: Vec<Vec<f64>>,
}

impl CorrelationResult {
    /// CSV with columns `i_row,i_col,j_row,j_col,value,stderr`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "i_row,i_col,j_row,j_col,value,stderr")?;
        for ((a, b), v) in self.pairs.iter().zip(&self.values) {
            writeln!(w, "{},{},{},{},{:.10},{:.3e}", a.0, a.1, b.0, b.1, v.mean, v.std_error)?;
        }
        Ok(())
    }

    fn position(&self, a: Site, b: Site) -> Option<usize> {
        self.pairs.iter().position(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a))
    }
}

fn canonical(a: Site, b: Site) -> (Site, Site) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

fn check_pairs(spec: &LatticeSpec, pairs: &[(Site, Site)]) -> Result<()> {
    for &(a, b) in pairs {
        for s in [a, b] {
            if s.0 >= spec.rows || s.1 >= spec.cols {
                return Err(PepsError::InvalidArgument(format!("site {s:?} outside {}x{}", spec.rows, spec.cols)));
            }
        }
    }
    Ok(())
}

/// Per-sample `S_a . S_b` estimators for one configuration. Strips and their
/// amplitudes are built once per row (or row range) and shared by all pairs.
struct PairEvaluator<'c, 'a> {
    cache: &'c mut ContractionCache<'a>,
    rows: HashMap<usize, (Strip, Amplitude)>,
}

impl<'c, 'a> PairEvaluator<'c, 'a> {
    fn row(&mut self, r: usize) -> Result<&mut (Strip, Amplitude)> {
        if !self.rows.contains_key(&r) {
            let mut strip = self.cache.row_strip(r)?;
            let w = strip.amplitude()?;
            if w.is_zero() {
                return Err(PepsError::ZeroAmplitude(format!("W = 0 at {}", self.cache.config())));
            }
            self.rows.insert(r, (strip, w));
        }
        Ok(self.rows.get_mut(&r).expect("inserted above"))
    }

    fn estimate(&mut self, a: Site, b: Site) -> Result<f64> {
        if a == b {
            return Ok(0.75);
        }
        let (a, b) = canonical(a, b);
        let (sa, sb) = (self.cache.config().get(a), self.cache.config().get(b));
        let zz = 0.25 * f64::from(sa) * f64::from(sb);
        if sa == sb {
            return Ok(zz);
        }
        let ta = self.cache.site_tensor(a, sb);
        let tb = self.cache.site_tensor(b, sa);
        let ratio = if a.0 == b.0 {
            let (c0, c1) = (a.1.min(b.1), a.1.max(b.1));
            let r = a.0;
            let mut columns: Vec<Vec<DenseTensor>> =
                (c0..=c1).map(|c| vec![self.cache.fixed_row(r)[c].clone()]).collect();
            columns[a.1 - c0][0] = ta;
            columns[b.1 - c0][0] = tb;
            let (strip, w) = self.row(r)?;
            let w = *w;
            strip.amplitude_with(c0, &columns)?.ratio(&w)
        } else {
            let w = self.row(b.0)?.1;
            let other = self.cache.config().swapped(a, b);
            self.cache.amplitude_changed_rows(&other, a.0, b.0)?.ratio(&w)
        };
        Ok(zz + 0.5 * ratio)
    }
}

/// Per-sample values of `S_a . S_b` for each pair at the cached configuration.
pub fn correlation_sample(cache: &mut ContractionCache<'_>, pairs: &[(Site, Site)]) -> Result<Vec<f64>> {
    let mut ev = PairEvaluator { cache, rows: HashMap::new() };
    pairs.iter().map(|&(a, b)| ev.estimate(a, b)).collect()
}

/// Sampled `<S_i . S_j>`. Each unordered pair is evaluated once per sample,
/// so `(i, j)` and `(j, i)` get identical estimates.
pub fn spin_correlation(state: &PepsState, pairs: &[(Site, Site)], mc: &McParams) -> Result<CorrelationResult> {
    check_pairs(state.spec(), pairs)?;
    let mut unique: Vec<(Site, Site)> = pairs.iter().map(|&(a, b)| canonical(a, b)).collect();
    unique.sort_unstable();
    unique.dedup();
    let raw = sample_observable(state, mc, |cache| correlation_sample(cache, &unique))?;
    let index: Vec<usize> = pairs
        .iter()
        .map(|&(a, b)| unique.binary_search(&canonical(a, b)).expect("pair listed"))
        .collect();
    let bins: Vec<Vec<f64>> = raw.iter().map(|bin| index.iter().map(|&u| bin[u]).collect()).collect();
    let values = (0..pairs.len())
        .map(|p| Estimator::from_bins(&bins.iter().map(|b| b[p]).collect::<Vec<_>>()))
        .collect();
    Ok(CorrelationResult { pairs: pairs.to_vec(), values, bins })
}

/// Sites of the bulk window that leaves `margin` rows and columns on every
/// side.
pub fn bulk_window(spec: &LatticeSpec, margin: usize) -> Result<Vec<Site>> {
    if spec.rows <= 2 * margin || spec.cols <= 2 * margin {
        return Err(PepsError::InvalidArgument(format!(
            "margin {margin} leaves no bulk window on {}x{}",
            spec.rows, spec.cols
        )));
    }
    Ok((margin..spec.rows - margin)
        .flat_map(|r| (margin..spec.cols - margin).map(move |c| (r, c)))
        .collect())
}

/// `+1` on the sublattice of the origin, `-1` on the other.
pub fn staggered_sign(site: Site) -> f64 {
    if (site.0 + site.1) % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Every unordered pair of the window, diagonal included.
pub fn window_pairs(window: &[Site]) -> Vec<(Site, Site)> {
    let mut pairs = Vec::with_capacity(window.len() * (window.len() + 1) / 2);
    for (k, &a) in window.iter().enumerate() {
        for &b in &window[k..] {
            pairs.push((a, b));
        }
    }
    pairs
}

/// `m_s^2 = (1/N^2) sum_{i,j in window} <S_i . S_j> (-1)^{p(i)+p(j)}` from
/// correlations that cover every pair of the window. The error bar comes
/// from the bins.
pub fn staggered_from_correlations(corr: &CorrelationResult, window: &[Site]) -> Result<(f64, f64)> {
    if window.is_empty() {
        return Err(PepsError::InvalidArgument("empty window".into()));
    }
    let n = window.len() as f64;
    let mut terms = Vec::with_capacity(window.len() * window.len());
    for &a in window {
        for &b in window {
            let p = corr
                .position(a, b)
                .ok_or_else(|| PepsError::InvalidArgument(format!("no correlation for {a:?}, {b:?}")))?;
            terms.push((p, staggered_sign(a) * staggered_sign(b)));
        }
    }
    let per_bin: Vec<f64> =
        corr.bins.iter().map(|bin| terms.iter().map(|&(p, s)| s * bin[p]).sum::<f64>() / (n * n)).collect();
    let est = Estimator::from_bins(&per_bin);
    Ok((est.mean, est.std_error))
}

/// Staggered magnetization on the bulk window with the given margin.
pub fn staggered_magnetization(state: &PepsState, window_margin: usize, mc: &McParams) -> Result<(f64, f64)> {
    let window = bulk_window(state.spec(), window_margin)?;
    let corr = spin_correlation(state, &window_pairs(&window), mc)?;
    staggered_from_correlations(&corr, &window)
}

/// Exact `<S_a . S_b>` of the state restricted to a magnetization sector,
/// summed over every configuration of the sector.
pub fn enumerated_correlations(state: &PepsState, dc: usize, sector_sz: i64, pairs: &[(Site, Site)]) -> Result<Vec<f64>> {
    let spec = state.spec();
    check_pairs(spec, pairs)?;
    let basis = SectorBasis::new(spec.n_sites(), sector_sz)?;
    let amps = sector_amplitudes(state, &basis, dc)?;
    let z: f64 = amps.iter().map(|w| w * w).sum();
    if !(z > 0.0) {
        return Err(PepsError::ZeroAmplitude("state vanishes on the sector".into()));
    }
    let mut out = Vec::with_capacity(pairs.len());
    for &(a, b) in pairs {
        if a == b {
            out.push(0.75);
            continue;
        }
        let mut acc = 0.0;
        for (k, &bits) in basis.states().iter().enumerate() {
            let w = amps[k];
            if w == 0.0 {
                continue;
            }
            let cfg = SpinConfig::from_bits(spec.rows, spec.cols, bits);
            let (sa, sb) = (cfg.get(a), cfg.get(b));
            acc += w * w * 0.25 * f64::from(sa) * f64::from(sb);
            if sa != sb {
                let j = basis.index(cfg.swapped(a, b).to_bits());
                acc += 0.5 * w * amps[j];
            }
        }
        out.push(acc / z);
    }
    Ok(out)
}

/// One finite-size data point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SizePoint {
    pub size: f64,
    pub value: f64,
    pub error: f64,
}

/// Point weights of the quadratic fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FitWeights {
    /// Equal weights; the error of the intercept is scaled by the residual
    /// scatter (with exactly three points, propagated from the input errors).
    #[default]
    Uniform,
    /// Weights `1/error^2`; the error comes from the covariance alone.
    InverseVariance,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extrapolation {
    /// `a` in `a + b/L + c/L^2`.
    pub value: f64,
    pub error: f64,
    pub coefficients: [f64; 3],
}

/// Least-squares fit of `a + b/L + c/L^2`, returning `a`.
pub fn quadratic_extrapolation(points: &[SizePoint], weights: FitWeights) -> Result<Extrapolation> {
    let mut sizes: Vec<f64> = points.iter().map(|p| p.size).collect();
    sizes.sort_by(f64::total_cmp);
    sizes.dedup();
    if sizes.len() < 3 {
        return Err(PepsError::InvalidArgument(format!("{} distinct sizes, need at least 3", sizes.len())));
    }
    for p in points {
        if !(p.size > 0.0 && p.value.is_finite() && p.error.is_finite() && p.error >= 0.0) {
            return Err(PepsError::InvalidArgument(format!("bad data point {p:?}")));
        }
        if weights == FitWeights::InverseVariance && p.error == 0.0 {
            return Err(PepsError::InvalidArgument("inverse-variance weights need non-zero errors".into()));
        }
    }
    let row = |p: &SizePoint| Vector3::new(1.0, 1.0 / p.size, 1.0 / (p.size * p.size));
    let weight = |p: &SizePoint| match weights {
        FitWeights::Uniform => 1.0,
        FitWeights::InverseVariance => 1.0 / (p.error * p.error),
    };
    let mut normal = Matrix3::zeros();
    let mut rhs = Vector3::zeros();
    for p in points {
        let x = row(p);
        normal += weight(p) * x * x.transpose();
        rhs += weight(p) * p.value * x;
    }
    let cov = normal
        .try_inverse()
        .ok_or_else(|| PepsError::InvalidArgument("singular design matrix".into()))?;
    let coef = cov * rhs;
    let error = match weights {
        FitWeights::InverseVariance => cov[(0, 0)].sqrt(),
        FitWeights::Uniform if points.len() > 3 => {
            let rss: f64 = points.iter().map(|p| (p.value - row(p).dot(&coef)).powi(2)).sum();
            (cov[(0, 0)] * rss / (points.len() - 3) as f64).sqrt()
        }
        FitWeights::Uniform => {
            // a = sum_k g_k y_k with g the first row of cov * X^T
            points.iter().map(|p| ((cov * row(p))[0] * p.error).powi(2)).sum::<f64>().sqrt()
        }
    };
    if !coef[0].is_finite() || !error.is_finite() {
        return Err(PepsError::NonFinite("quadratic fit".into()));
    }
    Ok(Extrapolation { value: coef[0], error, coefficients: [coef[0], coef[1], coef[2]] })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn neel_product(spec: &LatticeSpec) -> PepsState {
        let local: Vec<[f64; 2]> =
            (0..spec.n_sites()).map(|i| if staggered_sign(spec.site(i)) > 0.0 { [1.0, 0.0] } else { [0.0, 1.0] }).collect();
        PepsState::product_state(spec, &local).unwrap()
    }

    #[test]
    fn neel_product_correlations_and_magnetization() {
        let spec = LatticeSpec::heisenberg(4, 4).unwrap();
        let state = neel_product(&spec);
        let mc = McParams::new(20, 1, 2, 0);
        let sites: Vec<Site> = (0..16).map(|i| spec.site(i)).collect();
        let pairs = window_pairs(&sites);
        let corr = spin_correlation(&state, &pairs, &mc).unwrap();
        for ((a, b), v) in corr.pairs.iter().zip(&corr.values) {
            let expect = if a == b { 0.75 } else { 0.25 * staggered_sign(*a) * staggered_sign(*b) };
            assert_eq!(v.mean, expect);
            assert_eq!(v.std_error, 0.0);
        }
        for margin in [0, 1] {
            let (m, err) = staggered_magnetization(&state, margin, &mc).unwrap();
            let n = bulk_window(&spec, margin).unwrap().len() as f64;
            assert!((m - (0.25 + 0.5 / n)).abs() < 1e-14, "{m}");
            assert_eq!(err, 0.0);
        }
        assert!(bulk_window(&spec, 2).is_err());
    }

    #[test]
    fn uncorrelated_window_gives_three_quarters_over_n() {
        let window = [(0, 0), (0, 1), (1, 0), (1, 1), (2, 2)];
        let pairs = window_pairs(&window);
        let bins = vec![pairs.iter().map(|(a, b)| if a == b { 0.75 } else { 0.0 }).collect::<Vec<f64>>(); 3];
        let values = pairs.iter().map(|_| Estimator { mean: 0.0, std_error: 0.0, n_bins: 3 }).collect();
        let corr = CorrelationResult { pairs, values, bins };
        let (m, _) = staggered_from_correlations(&corr, &window).unwrap();
        assert!((m - 0.75 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn extrapolation_recovers_polynomials() {
        let pts = |f: &dyn Fn(f64) -> f64| -> Vec<SizePoint> {
            [8.0, 10.0, 12.0, 14.0, 16.0].iter().map(|&l| SizePoint { size: l, value: f(l), error: 1e-5 }).collect()
        };
        for w in [FitWeights::Uniform, FitWeights::InverseVariance] {
            let fit = quadratic_extrapolation(&pts(&|l| -0.6694 + 0.5 / l + 0.1 / (l * l)), w).unwrap();
            assert!((fit.value + 0.6694).abs() < 1e-10);
            assert!((fit.coefficients[1] - 0.5).abs() < 1e-8);
            let fit = quadratic_extrapolation(&pts(&|_| -0.3), w).unwrap();
            assert!((fit.value + 0.3).abs() < 1e-10);
            assert!(fit.coefficients[1].abs() < 1e-10 && fit.coefficients[2].abs() < 1e-10);
        }
    }

    #[test]
    fn extrapolation_rejects_degenerate_input() {
        let p = |l: f64| SizePoint { size: l, value: 1.0, error: 0.1 };
        assert!(quadratic_extrapolation(&[p(4.0), p(6.0)], FitWeights::Uniform).is_err());
        assert!(quadratic_extrapolation(&[p(4.0), p(4.0), p(6.0), p(6.0)], FitWeights::Uniform).is_err());
        let three = quadratic_extrapolation(&[p(4.0), p(6.0), p(8.0)], FitWeights::Uniform).unwrap();
        assert!(three.error > 0.0);
    }
}
