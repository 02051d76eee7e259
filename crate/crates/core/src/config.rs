//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. `--set key=value` overrides use
//! the same syntax and are applied after the file, in order.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::BoundaryConfig;
use crate::spectral::EigenMethod;

#[derive(Clone, Debug, PartialEq)]
pub enum InitialData {
    /// The first eigenfunction, normalized.
    Phi1,
    /// Uniform entries in `[-1, 1]` from the run seed, normalized.
    Random,
    /// Whitespace-separated node values in grid order.
    File(PathBuf),
}

impl FromStr for InitialData {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phi1" => Ok(Self::Phi1),
            "random" => Ok(Self::Random),
            _ => match s.strip_prefix("file:") {
                Some(p) if !p.is_empty() => Ok(Self::File(PathBuf::from(p))),
                _ => Err(Error::Config(format!("init must be phi1, random or file:PATH, got '{s}'"))),
            },
        }
    }
}

impl fmt::Display for InitialData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Phi1 => f.write_str("phi1"),
            Self::Random => f.write_str("random"),
            Self::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

/// Initial observer state relative to the plant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObserverInit {
    Zero,
    /// Observer starts on the plant state, so the estimation error is zero.
    Match,
}

impl FromStr for ObserverInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Self::Zero),
            "match" => Ok(Self::Match),
            _ => Err(Error::Config(format!("observer_init must be zero or match, got '{s}'"))),
        }
    }
}

/// Input applied on Γ1 in the observer scenario.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputSignal {
    Zero,
    /// `u(x, t) = sin(2πt) sin(πx / Lx)`.
    Sine,
}

impl FromStr for InputSignal {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Self::Zero),
            "sine" => Ok(Self::Sine),
            _ => Err(Error::Config(format!("input must be zero or sine, got '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    pub boundary: BoundaryConfig,
    pub mu: f64,
    pub alpha: f64,
    pub modes: usize,
    pub lqr_q: f64,
    pub lqr_r: f64,
    pub dt: f64,
    pub tmax: f64,
    pub seed: u64,
    pub window: f64,
    pub init: InitialData,
    pub observer_init: ObserverInit,
    pub input: InputSignal,
    pub eigen_method: EigenMethod,
    /// Defaults to `1e-6 |λ_1|`.
    pub eps_res: Option<f64>,
    pub rank_tol: f64,
    pub sing_tol: f64,
    pub cluster_tol: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            nx: 31,
            ny: 31,
            lx: 1.0,
            ly: 1.0,
            boundary: BoundaryConfig::B,
            mu: 13.0,
            alpha: 1.0,
            modes: 10,
            lqr_q: 1.0,
            lqr_r: 1.0,
            dt: 1e-3,
            tmax: 10.0,
            seed: 0,
            window: 0.5,
            init: InitialData::Phi1,
            observer_init: ObserverInit::Zero,
            input: InputSignal::Zero,
            eigen_method: EigenMethod::Auto,
            eps_res: None,
            rank_tol: 1e-8,
            sing_tol: 1e-8,
            cluster_tol: 1e-6,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value for {key}: '{value}'")))
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "nx" => self.nx = parse(key, v)?,
            "ny" => self.ny = parse(key, v)?,
            "lx" => self.lx = parse(key, v)?,
            "ly" => self.ly = parse(key, v)?,
            "boundary" => self.boundary = v.parse()?,
            "mu" => self.mu = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "modes" => self.modes = parse(key, v)?,
            "lqr_q" => self.lqr_q = parse(key, v)?,
            "lqr_r" => self.lqr_r = parse(key, v)?,
            "dt" => self.dt = parse(key, v)?,
            "tmax" => self.tmax = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "window" => self.window = parse(key, v)?,
            "init" => self.init = v.parse()?,
            "observer_init" => self.observer_init = v.parse()?,
            "input" => self.input = v.parse()?,
            "eigen_method" => {
                self.eigen_method = match v {
                    "auto" => EigenMethod::Auto,
                    "dense" => EigenMethod::Dense,
                    "shift-invert" => EigenMethod::ShiftInvert,
                    _ => return Err(Error::Config(format!("eigen_method must be auto, dense or shift-invert, got '{v}'"))),
                }
            }
            "eps_res" => self.eps_res = Some(parse(key, v)?),
            "rank_tol" => self.rank_tol = parse(key, v)?,
            "sing_tol" => self.sing_tol = parse(key, v)?,
            "cluster_tol" => self.cluster_tol = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies one `key=value` assignment.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got '{assignment}'")))?;
        self.set(k, v)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            cfg.apply(line).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    /// Defaults, then the file if given, then each override.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse_str(&text)?
            }
            None => Self::default(),
        };
        for o in overrides {
            cfg.apply(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lx", self.lx),
            ("ly", self.ly),
            ("alpha", self.alpha),
            ("lqr_q", self.lqr_q),
            ("lqr_r", self.lqr_r),
            ("dt", self.dt),
            ("tmax", self.tmax),
            ("rank_tol", self.rank_tol),
            ("sing_tol", self.sing_tol),
            ("cluster_tol", self.cluster_tol),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive and finite, got {v}")));
            }
        }
        if !self.mu.is_finite() {
            return Err(Error::Config(format!("mu must be finite, got {}", self.mu)));
        }
        if let Some(e) = self.eps_res {
            if e.is_nan() || e <= 0.0 {
                return Err(Error::Config(format!("eps_res must be positive, got {e}")));
            }
        }
        if self.modes == 0 {
            return Err(Error::Config("modes must be at least 1".into()));
        }
        if !(self.window > 0.0 && self.window <= 1.0) {
            return Err(Error::Config(format!("window must lie in (0, 1], got {}", self.window)));
        }
        if self.dt > self.tmax {
            return Err(Error::Config(format!("dt = {} exceeds tmax = {}", self.dt, self.tmax)));
        }
        Ok(())
    }
}
