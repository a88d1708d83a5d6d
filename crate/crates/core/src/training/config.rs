use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Regime {
    TeacherForcing,
    DepthArt,
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tf" | "teacher_forcing" => Ok(Self::TeacherForcing),
            "depthart" => Ok(Self::DepthArt),
            other => Err(Error::Config(format!(
                "unknown regime `{other}` (expected teacher_forcing or depthart)"
            ))),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TeacherForcing => "teacher_forcing",
            Self::DepthArt => "depthart",
        })
    }
}

/// Transformer training run, read from `key=value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    pub lr: f32,
    pub wd: f32,
    pub batch: usize,
    pub steps: usize,
    pub decay_period: usize,
    pub decay_gamma: f32,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Steps between periodic checkpoints (optional key, default 1000).
    pub checkpoint_every: usize,
    /// Frozen autoencoder checkpoint (optional key).
    pub vq: Option<PathBuf>,
}

pub const REQUIRED_KEYS: [&str; 10] = [
    "regime",
    "lr",
    "wd",
    "batch",
    "steps",
    "decay_period",
    "decay_gamma",
    "seed",
    "data_dir",
    "out_dir",
];

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::TeacherForcing,
            lr: 1e-4,
            wd: 1e-2,
            batch: 4,
            steps: 10_000,
            decay_period: 1000,
            decay_gamma: 0.8,
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            checkpoint_every: 1000,
            vq: None,
        }
    }
}

/// `key=value` lines in file order; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

pub fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for key `{key}`")))
}

impl TrainConfig {
    /// Parse `key=value` lines; `#` starts a comment. Every required key
    /// must be present; overrides are applied on top before validation.
    pub fn parse_with(text: &str, overrides: &[(&str, &str)]) -> Result<Self> {
        let mut pairs = parse_pairs(text)?;
        for (k, v) in overrides {
            pairs.push((k.to_string(), v.to_string()));
        }
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (k, v) in &pairs {
            match k.as_str() {
                "regime" => cfg.regime = v.parse()?,
                "lr" => cfg.lr = parse_value(k, v)?,
                "wd" => cfg.wd = parse_value(k, v)?,
                "batch" => cfg.batch = parse_value(k, v)?,
                "steps" => cfg.steps = parse_value(k, v)?,
                "decay_period" => cfg.decay_period = parse_value(k, v)?,
                "decay_gamma" => cfg.decay_gamma = parse_value(k, v)?,
                "seed" => cfg.seed = parse_value(k, v)?,
                "data_dir" => cfg.data_dir = PathBuf::from(v),
                "out_dir" => cfg.out_dir = PathBuf::from(v),
                "checkpoint_every" => cfg.checkpoint_every = parse_value(k, v)?,
                "vq" => cfg.vq = Some(PathBuf::from(v)),
                other => return Err(Error::Config(format!("unknown key `{other}`"))),
            }
            seen.push(k.as_str());
        }
        if let Some(missing) = REQUIRED_KEYS.iter().find(|k| !seen.contains(k)) {
            return Err(Error::Config(format!("missing config key `{missing}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with(text, &[])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr > 0.0),
            ("wd", self.wd > 0.0),
            ("batch", self.batch > 0),
            ("steps", self.steps > 0),
            ("decay_period", self.decay_period > 0),
            ("decay_gamma", self.decay_gamma > 0.0),
            ("checkpoint_every", self.checkpoint_every > 0),
        ];
        match positive.iter().find(|(_, ok)| !ok) {
            Some((key, _)) => Err(Error::Config(format!("`{key}` must be positive"))),
            None => Ok(()),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "regime={}\nlr={}\nwd={}\nbatch={}\nsteps={}\ndecay_period={}\ndecay_gamma={}\nseed={}\ndata_dir={}\nout_dir={}\ncheckpoint_every={}\n",
            self.regime,
            self.lr,
            self.wd,
            self.batch,
            self.steps,
            self.decay_period,
            self.decay_gamma,
            self.seed,
            self.data_dir.display(),
            self.out_dir.display(),
            self.checkpoint_every
        );
        if let Some(vq) = &self.vq {
            s.push_str(&format!("vq={}\n", vq.display()));
        }
        s
    }
}
