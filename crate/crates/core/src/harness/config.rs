use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::chains::{Region, ThresholdFunction};
use crate::error::{ArwError, Result};
use crate::lattice::MIN_TORUS_SIDE;
use crate::stabilizer::{Budget, Mode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Aggregate,
    Region,
    Sprinkle,
    WiredSample,
    Hockey,
    Free,
    Wake,
    Correlations,
    Hyperuniformity,
    Quadrature,
    Coupling,
}

impl Experiment {
    pub const ALL: [Experiment; 11] = [
        Experiment::Aggregate,
        Experiment::Region,
        Experiment::Sprinkle,
        Experiment::WiredSample,
        Experiment::Hockey,
        Experiment::Free,
        Experiment::Wake,
        Experiment::Correlations,
        Experiment::Hyperuniformity,
        Experiment::Quadrature,
        Experiment::Coupling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Aggregate => "aggregate",
            Experiment::Region => "region",
            Experiment::Sprinkle => "sprinkle",
            Experiment::WiredSample => "wired-sample",
            Experiment::Hockey => "hockey",
            Experiment::Free => "free",
            Experiment::Wake => "wake",
            Experiment::Correlations => "correlations",
            Experiment::Hyperuniformity => "hyperuniformity",
            Experiment::Quadrature => "quadrature",
            Experiment::Coupling => "coupling",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Experiment {
    type Err = ArwError;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| ArwError::Config(format!("unknown experiment `{s}`")))
    }
}

/// Which ensemble a correlation or coupling experiment samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ensemble {
    /// Free chain on the torus at step `floor(density L^d)`.
    Free,
    /// Stationary wired chain (exact sample) on the box `[1, L]^d`.
    Wired,
    /// Point-source aggregate of `n` particles.
    Point,
    /// Wake chain on the torus after `steps` steps.
    Wake,
}

impl std::str::FromStr for Ensemble {
    type Err = ArwError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "free" => Ok(Ensemble::Free),
            "wired" => Ok(Ensemble::Wired),
            "point" => Ok(Ensemble::Point),
            "wake" => Ok(Ensemble::Wake),
            other => Err(ArwError::Config(format!("unknown ensemble `{other}` (free, wired, point, wake)"))),
        }
    }
}

impl fmt::Display for Ensemble {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ensemble::Free => "free",
            Ensemble::Wired => "wired",
            Ensemble::Point => "point",
            Ensemble::Wake => "wake",
        })
    }
}

/// Sleep rate that may be infinite; JSON spells infinity as `"inf"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lambda(pub f64);

impl Serialize for Lambda {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() && self.0 > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Lambda {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(x) => Ok(Lambda(x)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

impl std::str::FromStr for Lambda {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "inf" | "infinity" => Ok(Lambda(f64::INFINITY)),
            _ => s.parse::<f64>().map(Lambda).map_err(|e| format!("bad lambda `{s}`: {e}")),
        }
    }
}

impl fmt::Display for Lambda {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_infinite() && self.0 > 0.0 {
            f.write_str("inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

/// One experiment run. Keys mirror the command-line flags one-to-one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Side length of the box or torus.
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    pub side: Option<usize>,
    pub lambda: Lambda,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_replicas")]
    pub replicas: u64,
    /// Worker threads; defaults to the available parallelism. Never affects results.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Instruction budget per stabilization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Particles of a point source.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<u64>,
    /// Poisson sprinkle mean.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tmax: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tstep: Option<f64>,
    /// Particle density `k / L^d`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    /// Chain steps at which to record the state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_max: Option<usize>,
    /// Box side lengths for count variances.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<usize>>,
    /// Source region in text form, e.g. `disk:0,0,1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    /// Threshold function: `nlog2n`, `n1.5` or `cnlogn:<c>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annuli: Option<usize>,
    /// Reference density (zeta_a, zeta_c) used by the estimators.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<Ensemble>,
    /// Centers sampled for the quadrature test functions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centers: Option<usize>,
    /// Write PGM snapshots of replica 0.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub snapshots: bool,
}

fn default_dim() -> usize {
    2
}

fn default_replicas() -> u64 {
    1
}

pub const MAX_DIM: usize = 4;

impl ExperimentConfig {
    /// Defaults for `experiment` with sleep rate `lambda`.
    pub fn new(experiment: Experiment, lambda: f64) -> Self {
        ExperimentConfig {
            experiment,
            dim: 2,
            side: None,
            lambda: Lambda(lambda),
            mode: Mode::Literal,
            seed: 0,
            replicas: 1,
            threads: None,
            budget: None,
            out: None,
            n: None,
            t: None,
            tmax: None,
            tstep: None,
            density: None,
            steps: None,
            record: None,
            r_max: None,
            boxes: None,
            region: None,
            eps: None,
            threshold: None,
            annuli: None,
            zeta: None,
            ensemble: None,
            centers: None,
            snapshots: false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| ArwError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ArwError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs always serialize")
    }

    pub fn budget(&self) -> Budget {
        self.budget.map_or_else(Budget::default, Budget::limit)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(format!("arw-output/{}", self.experiment)))
    }

    pub fn side_or(&self, default: usize) -> usize {
        self.side.unwrap_or(default)
    }

    pub fn region_parsed(&self) -> Result<Region> {
        self.region.as_deref().unwrap_or("disk:0,0,1").parse()
    }

    pub fn threshold_parsed(&self) -> Result<ThresholdFunction> {
        self.threshold.as_deref().unwrap_or("nlog2n").parse()
    }

    /// Command-line arguments that reproduce this config.
    pub fn to_args(&self) -> Vec<String> {
        let mut a = vec![self.experiment.to_string()];
        let mut push = |flag: &str, value: String| {
            a.push(format!("--{flag}"));
            a.push(value);
        };
        let list = |v: &[u64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        push("dim", self.dim.to_string());
        if let Some(l) = self.side {
            push("L", l.to_string());
        }
        push("lambda", self.lambda.to_string());
        push("mode", self.mode.to_string());
        push("seed", self.seed.to_string());
        push("replicas", self.replicas.to_string());
        if let Some(v) = self.threads {
            push("threads", v.to_string());
        }
        if let Some(v) = self.budget {
            push("budget", v.to_string());
        }
        if let Some(v) = &self.out {
            push("out", v.display().to_string());
        }
        if let Some(v) = self.n {
            push("n", v.to_string());
        }
        for (flag, v) in [("t", self.t), ("tmax", self.tmax), ("tstep", self.tstep), ("density", self.density)] {
            if let Some(v) = v {
                push(flag, v.to_string());
            }
        }
        if let Some(v) = self.steps {
            push("steps", v.to_string());
        }
        if let Some(v) = &self.record {
            push("record", list(v));
        }
        if let Some(v) = self.r_max {
            push("r-max", v.to_string());
        }
        if let Some(v) = &self.boxes {
            push("boxes", list(&v.iter().map(|&x| x as u64).collect::<Vec<_>>()));
        }
        if let Some(v) = &self.region {
            push("region", v.clone());
        }
        if let Some(v) = self.eps {
            push("eps", v.to_string());
        }
        if let Some(v) = &self.threshold {
            push("threshold", v.clone());
        }
        if let Some(v) = self.annuli {
            push("annuli", v.to_string());
        }
        if let Some(v) = self.zeta {
            push("zeta", v.to_string());
        }
        if let Some(v) = self.ensemble {
            push("ensemble", v.to_string());
        }
        if let Some(v) = self.centers {
            push("centers", v.to_string());
        }
        if self.snapshots {
            a.push("--snapshots".into());
        }
        a
    }

    /// Check every parameter against its documented range.
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ArwError::Config(m));
        let lambda = self.lambda.0;
        if lambda.is_nan() || lambda <= 0.0 {
            return err(format!("lambda must be positive, got {lambda}"));
        }
        if lambda.is_infinite() && self.mode == Mode::Literal {
            return err("lambda = inf needs --mode collapsed".into());
        }
        if !(1..=MAX_DIM).contains(&self.dim) {
            return err(format!("dim must lie in 1..={MAX_DIM}, got {}", self.dim));
        }
        if self.replicas == 0 {
            return err("replicas must be at least 1".into());
        }
        if self.threads == Some(0) {
            return err("threads must be at least 1".into());
        }
        if self.budget == Some(0) {
            return err("budget must be positive".into());
        }
        if let Some(l) = self.side {
            if l == 0 {
                return err("L must be positive".into());
            }
        }
        if let Some(n) = self.n {
            if n == 0 || n > u32::MAX as u64 {
                return err(format!("n must lie in 1..=2^32-1, got {n}"));
            }
        }
        for (name, v) in [("t", self.t), ("tmax", self.tmax), ("tstep", self.tstep), ("eps", self.eps)] {
            if let Some(v) = v {
                if !v.is_finite() || v < 0.0 || (name != "t" && v == 0.0) {
                    return err(format!("{name} out of range: {v}"));
                }
            }
        }
        for (name, v) in [("density", self.density), ("zeta", self.zeta)] {
            if let Some(v) = v {
                if !(v > 0.0 && v <= 1.0) {
                    return err(format!("{name} must lie in (0, 1], got {v}"));
                }
            }
        }
        if let Some(b) = &self.boxes {
            if b.is_empty() || b.contains(&0) {
                return err("boxes must be a non-empty list of positive sides".into());
            }
        }
        if self.annuli == Some(0) {
            return err("annuli must be positive".into());
        }
        if self.centers == Some(0) {
            return err("centers must be positive".into());
        }
        let torus = matches!(
            (self.experiment, self.ensemble),
            (Experiment::Sprinkle | Experiment::Free | Experiment::Wake | Experiment::Hyperuniformity, _)
                | (Experiment::Correlations | Experiment::Coupling, Some(Ensemble::Free | Ensemble::Wake))
        );
        if torus && self.side.is_some_and(|l| l < MIN_TORUS_SIDE) {
            return err(format!("torus side must be at least {MIN_TORUS_SIDE}"));
        }
        let two_d = matches!(self.experiment, Experiment::Correlations | Experiment::Wake | Experiment::Quadrature);
        if two_d && self.dim != 2 {
            return err(format!("{} is implemented for dim = 2", self.experiment));
        }
        match self.experiment {
            Experiment::Region | Experiment::Quadrature => {
                let r = self.region_parsed()?;
                if r.dim() != self.dim {
                    return err(format!("region has dimension {}, run has {}", r.dim(), self.dim));
                }
            }
            Experiment::Free => {
                self.threshold_parsed()?;
            }
            Experiment::Correlations | Experiment::Coupling => {
                if self.ensemble == Some(Ensemble::Point) && self.experiment == Experiment::Coupling {
                    return err("coupling needs a chain ensemble (wired, free, wake)".into());
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let mut c = ExperimentConfig::new(Experiment::Hockey, 2.0);
        c.side = Some(64);
        c.tmax = Some(1.2);
        c.record = Some(vec![1, 10]);
        let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert!(c.to_json().contains("\"L\": 64"));
        let err = ExperimentConfig::from_json(r#"{"experiment":"hockey","lambda":1,"colour":3}"#).unwrap_err();
        assert!(matches!(err, ArwError::Config(_)));
    }

    #[test]
    fn infinite_lambda_is_spelled_inf() {
        let mut c = ExperimentConfig::new(Experiment::Aggregate, f64::INFINITY);
        c.mode = Mode::Collapsed;
        assert!(c.to_json().contains("\"inf\""));
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
        c.validate().unwrap();
        c.mode = Mode::Literal;
        assert!(c.validate().is_err());
    }

    #[test]
    fn validation_rejects_bad_ranges() {
        assert!(ExperimentConfig::new(Experiment::Aggregate, -1.0).validate().is_err());
        assert!(ExperimentConfig::new(Experiment::Aggregate, 0.0).validate().is_err());
        let mut c = ExperimentConfig::new(Experiment::Free, 1.0);
        c.side = Some(2);
        assert!(c.validate().is_err());
        c.side = Some(8);
        c.threshold = Some("bogus".into());
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::new(Experiment::Region, 1.0);
        c.region = Some("ball:0,0,0,1".into());
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::new(Experiment::Wake, 1.0);
        c.density = Some(1.5);
        assert!(c.validate().is_err());
    }

    #[test]
    fn experiment_names_round_trip() {
        for e in Experiment::ALL {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
            let json = serde_json::to_string(&e).unwrap();
            assert_eq!(json, format!("\"{}\"", e.name()));
        }
    }
}
