//! Run configuration in a plain `key = value` format.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Unknown keys, repeated keys and malformed values are errors.
//!
//! | key            | default                      | meaning                                  |
//! |----------------|------------------------------|------------------------------------------|
//! | `rows`, `cols` | required                     | lattice size                             |
//! | `j1`, `j2`     | `1`, `0`                     | couplings                                |
//! | `D`            | `2`                          | PEPS bond dimension                      |
//! | `Dc`           | `2 * D`                      | boundary-MPS cutoff, at least `D`        |
//! | `su_schedule`  | `0.01:1e-6:20000,0.001:1e-6:20000` | simple-update stages               |
//! | `go_schedule`  | desk schedule                | see [`GoSchedule::parse`]                |
//! | `walkers`      | `1`                          | Markov chains                            |
//! | `sweeps`       | `10000`                      | measured sweeps per walker for `measure` |
//! | `seed`         | `0`                          | root seed                                |
//! | `sector`       | `0`                          | total Sz of sampled and exact states     |
//! | `margin`       | `1`                          | bulk-window margin for `m_s^2`           |
//! | `threads`      | `0`                          | worker threads, `0` for all cores        |
//! | `out`          | `run`                        | output directory                         |

use std::fmt::Write as _;

use crate::error::{PepsError, Result};
use crate::gradient_opt::GoSchedule;
use crate::lattice::LatticeSpec;
use crate::monte_carlo::McParams;
use crate::simple_update::SuSchedule;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub lattice: LatticeSpec,
    pub bond_dim: usize,
    pub dc: usize,
    pub su_schedule: SuSchedule,
    pub go_schedule: GoSchedule,
    pub walkers: usize,
    pub sweeps: usize,
    pub seed: u64,
    pub sector: i64,
    pub margin: usize,
    pub threads: usize,
    pub out: String,
}

const KEYS: [&str; 15] = [
    "rows", "cols", "j1", "j2", "D", "Dc", "su_schedule", "go_schedule", "walkers", "sweeps", "seed", "sector",
    "margin", "threads", "out",
];

fn value<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| PepsError::Config(format!("`{raw}` is not a valid value for `{key}`")))
}

impl RunConfig {
    /// Configuration with every default filled in.
    pub fn new(rows: usize, cols: usize, bond_dim: usize) -> Result<Self> {
        let cfg = RunConfig {
            lattice: LatticeSpec::heisenberg(rows, cols)?,
            bond_dim,
            dc: 2 * bond_dim,
            su_schedule: SuSchedule::standard(),
            go_schedule: GoSchedule::desk(),
            walkers: 1,
            sweeps: 10_000,
            seed: 0,
            sector: 0,
            margin: 1,
            threads: 0,
            out: "run".into(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.lattice.validate()?;
        if self.bond_dim == 0 {
            return Err(PepsError::Config("D must be at least 1".into()));
        }
        if self.dc < self.bond_dim {
            return Err(PepsError::Config(format!("Dc = {} is below D = {}", self.dc, self.bond_dim)));
        }
        if self.walkers == 0 || self.sweeps == 0 {
            return Err(PepsError::Config("walkers and sweeps must be positive".into()));
        }
        if self.out.is_empty() || self.out.contains(['\n', '#']) {
            return Err(PepsError::Config("out must be a single-line path".into()));
        }
        self.su_schedule.validate()?;
        self.go_schedule.validate()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut seen: Vec<(String, String)> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| PepsError::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, raw) = (key.trim(), raw.trim());
            if !KEYS.contains(&key) {
                return Err(PepsError::Config(format!("line {}: unknown key `{key}`", n + 1)));
            }
            if seen.iter().any(|(k, _)| k == key) {
                return Err(PepsError::Config(format!("line {}: `{key}` given twice", n + 1)));
            }
            seen.push((key.to_string(), raw.to_string()));
        }
        let get = |k: &str| seen.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
        let rows = value("rows", get("rows").ok_or_else(|| PepsError::Config("missing `rows`".into()))?)?;
        let cols = value("cols", get("cols").ok_or_else(|| PepsError::Config("missing `cols`".into()))?)?;
        let bond_dim: usize = get("D").map_or(Ok(2), |v| value("D", v))?;
        let j1 = get("j1").map_or(Ok(1.0), |v| value("j1", v))?;
        let j2 = get("j2").map_or(Ok(0.0), |v| value("j2", v))?;
        let cfg = RunConfig {
            lattice: LatticeSpec::new(rows, cols, j1, j2)?,
            bond_dim,
            dc: get("Dc").map_or(Ok(2 * bond_dim), |v| value("Dc", v))?,
            su_schedule: get("su_schedule").map_or(Ok(SuSchedule::standard()), SuSchedule::parse)?,
            go_schedule: get("go_schedule").map_or(Ok(GoSchedule::desk()), GoSchedule::parse)?,
            walkers: get("walkers").map_or(Ok(1), |v| value("walkers", v))?,
            sweeps: get("sweeps").map_or(Ok(10_000), |v| value("sweeps", v))?,
            seed: get("seed").map_or(Ok(0), |v| value("seed", v))?,
            sector: get("sector").map_or(Ok(0), |v| value("sector", v))?,
            margin: get("margin").map_or(Ok(1), |v| value("margin", v))?,
            threads: get("threads").map_or(Ok(0), |v| value("threads", v))?,
            out: get("out").unwrap_or("run").to_string(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key in a fixed order; [`RunConfig::parse`] reads it back to an
    /// equal configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let l = &self.lattice;
        let _ = writeln!(s, "rows = {}\ncols = {}\nj1 = {}\nj2 = {}", l.rows, l.cols, l.j1, l.j2);
        let _ = writeln!(s, "D = {}\nDc = {}", self.bond_dim, self.dc);
        let _ = writeln!(s, "su_schedule = {}", self.su_schedule.to_text());
        let _ = writeln!(s, "go_schedule = {}", self.go_schedule.to_text());
        let _ = writeln!(s, "walkers = {}\nsweeps = {}\nseed = {}", self.walkers, self.sweeps, self.seed);
        let _ = writeln!(s, "sector = {}\nmargin = {}\nthreads = {}\nout = {}", self.sector, self.margin, self.threads, self.out);
        s
    }

    /// Sampling parameters for `sweeps` measured sweeps per walker.
    pub fn mc_params(&self, sweeps: usize) -> McParams {
        let mut p = McParams::new(sweeps, self.walkers, self.dc, self.seed);
        p.sector_sz = self.sector;
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_in() {
        let c = RunConfig::parse("rows=4\ncols=4\nD=2").unwrap();
        assert_eq!(c.lattice.j2, 0.0);
        assert_eq!(c.dc, 4);
        assert_eq!(c.seed, 0);
        assert_eq!(c, RunConfig::new(4, 4, 2).unwrap());
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "rows=4\ncols=4\nDc=3\nD=4",
            "rows=4\ncols=4\ncolour=red",
            "rows=4\ncols=4\nD=two",
            "rows=4\ncols=4\nrows=5",
            "cols=4",
            "rows=4\ncols=4\nwalkers=0",
            "rows=4\ncols=4\ngo_schedule=3,decay=0.9,M=10",
            "rows=4 cols=4",
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text:?}");
        }
    }

    #[test]
    fn canonical_round_trip() {
        let text = "# comment\nrows = 4\ncols = 6 # trailing\nj2 = 0.56\nD = 3\nseed = 17\n\
                    su_schedule = 0.05:1e-5:300,0.005:1e-7:900\ngo_schedule = 5,dt=0.01,M=100..300; 2,decay=0.9,M=50\n\
                    walkers = 3\nsector = 1\nout = results/a";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.dc, 6);
        let again = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.to_text(), c.to_text());
    }
}
