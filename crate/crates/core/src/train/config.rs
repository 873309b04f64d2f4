//! Training configuration and its `key=value` file form.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::KvMap;

/// Which regularizer the middle phase adds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseOrder {
    /// Class-aware loss first, relation loss in the last phase.
    Algorithm1,
    /// Relation loss first, class-aware loss in the last phase.
    Prose,
}

impl FromStr for PhaseOrder {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "algorithm1" => Ok(Self::Algorithm1),
            "prose" => Ok(Self::Prose),
            _ => Err(format!("expected algorithm1 or prose, found {s:?}")),
        }
    }
}

impl fmt::Display for PhaseOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Algorithm1 => "algorithm1",
            Self::Prose => "prose",
        })
    }
}

/// Which probabilities are differentiated for region contribution scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreTarget {
    /// Sum of the softmax answer distribution (constant in exact arithmetic).
    Softmax,
    /// Sum of per-answer sigmoid probabilities.
    Sigmoid,
    /// Softmax probability of the predicted answer.
    Predicted,
}

/// How the `d × N` gradient collapses to one score per region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreReduction {
    /// Signed column sum.
    Signed,
    /// Column sum of absolute values.
    Abs,
    /// Column sum of gradient times input.
    GradInput,
}

macro_rules! keyword_enum {
    ($t:ty { $($name:literal => $v:expr),+ $(,)? }) => {
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($v),)+
                    _ => Err(format!("unknown value {s:?}")),
                }
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $v { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

keyword_enum!(ScoreTarget {
    "softmax" => ScoreTarget::Softmax,
    "sigmoid" => ScoreTarget::Sigmoid,
    "predicted" => ScoreTarget::Predicted,
});

keyword_enum!(ScoreReduction {
    "signed" => ScoreReduction::Signed,
    "abs" => ScoreReduction::Abs,
    "grad_input" => ScoreReduction::GradInput,
});

/// Warm-up, plateau and step decay, indexed by 1-based epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    /// Per-epoch increment during warm-up.
    pub ramp: f64,
    pub peak: f64,
    /// Last epoch before decay starts.
    pub decay_start: usize,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub floor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            ramp: 2.5e-5,
            peak: 1e-4,
            decay_start: 16,
            decay_factor: 0.25,
            decay_every: 2,
            floor: 1e-6,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        let e = epoch.max(1);
        if e <= self.decay_start {
            return (self.ramp * e as f64).min(self.peak);
        }
        let base = (self.ramp * self.decay_start as f64).min(self.peak);
        let steps = (e - self.decay_start) / self.decay_every.max(1);
        (base * self.decay_factor.powi(steps as i32)).max(self.floor)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_c: f64,
    pub lambda_b: f64,
    pub lambda_vib: f64,
    pub t0: usize,
    pub t1: usize,
    pub t2: usize,
    pub batch_size: usize,
    /// Negative candidate count N′.
    pub n_prime: usize,
    /// Salient set size |O*|.
    pub tau: usize,
    /// Attended-region count; `None` means half the regions, rounded up.
    pub p: Option<usize>,
    pub k_max: usize,
    pub lr: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub order: PhaseOrder,
    pub score_target: ScoreTarget,
    pub score_reduction: ScoreReduction,
    pub d_h: usize,
    pub d_a: usize,
    pub d_m: usize,
    pub d_z: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_c: 4.0,
            lambda_b: 2.0,
            lambda_vib: 1e-3,
            t0: 12,
            t1: 14,
            t2: 20,
            batch_size: 32,
            n_prime: 20,
            tau: 2,
            p: None,
            k_max: 3,
            lr: LrSchedule::default(),
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            seed: 0,
            order: PhaseOrder::Algorithm1,
            score_target: ScoreTarget::Predicted,
            score_reduction: ScoreReduction::GradInput,
            d_h: 64,
            d_a: 32,
            d_m: 64,
            d_z: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.t0 <= self.t1 && self.t1 <= self.t2) {
            return bad(format!("phase bounds must satisfy T0 <= T1 <= T2, got {} {} {}", self.t0, self.t1, self.t2));
        }
        if self.t2 == 0 {
            return bad("T2 must be >= 1".into());
        }
        for (name, v) in [("lambda_c", self.lambda_c), ("lambda_b", self.lambda_b), ("lambda_vib", self.lambda_vib)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.n_prime == 0 || self.tau == 0 {
            return bad("n_prime and tau must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("adam betas must lie in [0,1) and eps must be positive".into());
        }
        let lr = &self.lr;
        if !(lr.ramp > 0.0 && lr.peak > 0.0 && lr.floor >= 0.0 && lr.decay_factor > 0.0 && lr.decay_factor <= 1.0) {
            return bad(format!("invalid learning-rate schedule {lr:?}"));
        }
        if [self.d_h, self.d_a, self.d_m, self.d_z].contains(&0) {
            return bad("hidden dimensions must be >= 1".into());
        }
        Ok(())
    }

    /// Salient-free attended-region count for `n` regions.
    pub fn attended(&self, n: usize) -> usize {
        self.p.unwrap_or(n.div_ceil(2))
    }

    pub fn from_kv(mut kv: KvMap) -> Result<Self> {
        let mut c = Self::default();
        kv.take_into("lambda_c", &mut c.lambda_c)?;
        kv.take_into("lambda_b", &mut c.lambda_b)?;
        kv.take_into("lambda_vib", &mut c.lambda_vib)?;
        kv.take_into("t0", &mut c.t0)?;
        kv.take_into("t1", &mut c.t1)?;
        kv.take_into("t2", &mut c.t2)?;
        kv.take_into("batch_size", &mut c.batch_size)?;
        kv.take_into("n_prime", &mut c.n_prime)?;
        kv.take_into("tau", &mut c.tau)?;
        if let Some(raw) = kv.take::<String>("p")? {
            c.p = match raw.as_str() {
                "auto" => None,
                s => Some(s.parse().map_err(|e| Error::Config(format!("bad value {s:?} for p: {e}")))?),
            };
        }
        kv.take_into("k_max", &mut c.k_max)?;
        kv.take_into("lr_ramp", &mut c.lr.ramp)?;
        kv.take_into("lr_peak", &mut c.lr.peak)?;
        kv.take_into("lr_decay_start", &mut c.lr.decay_start)?;
        kv.take_into("lr_decay_factor", &mut c.lr.decay_factor)?;
        kv.take_into("lr_decay_every", &mut c.lr.decay_every)?;
        kv.take_into("lr_floor", &mut c.lr.floor)?;
        kv.take_into("beta1", &mut c.beta1)?;
        kv.take_into("beta2", &mut c.beta2)?;
        kv.take_into("adam_eps", &mut c.adam_eps)?;
        kv.take_into("seed", &mut c.seed)?;
        kv.take_into("order", &mut c.order)?;
        kv.take_into("score_target", &mut c.score_target)?;
        kv.take_into("score_reduction", &mut c.score_reduction)?;
        kv.take_into("d_h", &mut c.d_h)?;
        kv.take_into("d_a", &mut c.d_a)?;
        kv.take_into("d_m", &mut c.d_m)?;
        kv.take_into("d_z", &mut c.d_z)?;
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(KvMap::parse_config(text)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies `VPL_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var("VPL_SEED") {
            self.seed = raw
                .trim()
                .parse()
                .map_err(|e| Error::Config(format!("VPL_SEED={raw:?}: {e}")))?;
        }
        Ok(())
    }

    pub fn to_kv_lines(&self) -> String {
        let p = self.p.map_or("auto".to_string(), |p| p.to_string());
        let pairs: Vec<(&str, String)> = vec![
            ("lambda_c", self.lambda_c.to_string()),
            ("lambda_b", self.lambda_b.to_string()),
            ("lambda_vib", self.lambda_vib.to_string()),
            ("t0", self.t0.to_string()),
            ("t1", self.t1.to_string()),
            ("t2", self.t2.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("n_prime", self.n_prime.to_string()),
            ("tau", self.tau.to_string()),
            ("p", p),
            ("k_max", self.k_max.to_string()),
            ("lr_ramp", self.lr.ramp.to_string()),
            ("lr_peak", self.lr.peak.to_string()),
            ("lr_decay_start", self.lr.decay_start.to_string()),
            ("lr_decay_factor", self.lr.decay_factor.to_string()),
            ("lr_decay_every", self.lr.decay_every.to_string()),
            ("lr_floor", self.lr.floor.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("seed", self.seed.to_string()),
            ("order", self.order.to_string()),
            ("score_target", self.score_target.to_string()),
            ("score_reduction", self.score_reduction.to_string()),
            ("d_h", self.d_h.to_string()),
            ("d_a", self.d_a.to_string()),
            ("d_m", self.d_m.to_string()),
            ("d_z", self.d_z.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_values() {
        let s = LrSchedule::default();
        assert!((s.at(1) - 2.5e-5).abs() < 1e-18);
        assert!((s.at(4) - 1e-4).abs() < 1e-18);
        assert!((s.at(16) - 1e-4).abs() < 1e-18);
        assert!((s.at(17) - 1e-4).abs() < 1e-18);
        assert!((s.at(18) - 2.5e-5).abs() < 1e-18);
        assert!((s.at(20) - 6.25e-6).abs() < 1e-18);
        assert_eq!(s.at(200), 1e-6);
    }

    #[test]
    fn kv_round_trip_and_errors() {
        let mut c = TrainConfig::default();
        c.p = Some(3);
        c.order = PhaseOrder::Prose;
        c.score_reduction = ScoreReduction::Abs;
        assert_eq!(TrainConfig::parse(&c.to_kv_lines()).unwrap(), c);
        assert!(TrainConfig::parse("lamda_c=1\n").is_err());
        assert!(TrainConfig::parse("t0=5\nt1=3\n").is_err());
        assert!(TrainConfig::parse("batch_size=1\n").is_err());
        assert!(TrainConfig::parse("lambda_b=-1\n").is_err());
        assert!(TrainConfig::parse("order=sideways\n").is_err());
    }
}
