//! Run configuration shared by the library and the command-line driver.
//!
//! The on-disk format is one `key = value` pair per line; `#` starts a comment.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numeric::{BitCost, Rounding};

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    /// Universe size `U`; keys lie in `[0, U)`.
    pub universe: u64,
    /// Largest key count one compressed treap is sized for.
    pub nmax: u64,
    /// Weight range `W` (a power of two).
    pub weight_range: u64,
    /// Number of auxiliary permutation arrays; `None` means `W^2`.
    pub a_count: Option<u64>,
    /// Entropy-encoder redundancy parameter.
    pub q: u64,
    pub delta_slack: f64,
    pub delta_mid: f64,
    pub delta_h: f64,
    /// Weight floor; `None` means `max(1, W / (16 nmax))`.
    pub t_fail: Option<u64>,
    /// Block parameter; `None` selects it from `n`.
    pub block: Option<u64>,
    pub seed: u64,
    /// Fractional bits of every fixed-point cost.
    pub frac_bits: u32,
    /// Node output spills are capped at `2^(c_spill * w)`.
    pub c_spill: u32,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            universe: 1 << 20,
            nmax: 8,
            weight_range: 16,
            a_count: None,
            q: 256,
            delta_slack: 0.5,
            delta_mid: 0.1,
            delta_h: 0.05,
            t_fail: None,
            block: None,
            seed: 1,
            frac_bits: crate::numeric::DEFAULT_FRAC_BITS,
            c_spill: 4,
        }
    }
}

const KEYS: &[&str] = &[
    "U", "nmax", "W", "A_count", "q", "delta_slack", "delta_mid", "delta_H", "T_fail", "B", "seed",
    "F", "c_spill",
];

impl Config {
    /// Parses `key = value` lines on top of the defaults.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Applies one override; keys match the config-file spelling.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            let cleaned = v.replace('_', "");
            if let Some(exp) = cleaned.strip_prefix("2^") {
                let e: u32 = exp
                    .parse()
                    .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))?;
                let s = (1u128 << e).to_string();
                return s.parse().map_err(|_| Error::Config(format!("{key}: '{v}' out of range")));
            }
            cleaned.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
        }
        let auto = |v: &str| v.eq_ignore_ascii_case("auto");
        match key {
            "U" => self.universe = num(key, value)?,
            "nmax" => self.nmax = num(key, value)?,
            "W" => self.weight_range = num(key, value)?,
            "A_count" => self.a_count = if auto(value) { None } else { Some(num(key, value)?) },
            "q" => self.q = num(key, value)?,
            "delta_slack" => self.delta_slack = num(key, value)?,
            "delta_mid" => self.delta_mid = num(key, value)?,
            "delta_H" => self.delta_h = num(key, value)?,
            "T_fail" => self.t_fail = if auto(value) { None } else { Some(num(key, value)?) },
            "B" => self.block = if auto(value) { None } else { Some(num(key, value)?) },
            "seed" => self.seed = num(key, value)?,
            "F" => self.frac_bits = num(key, value)?,
            "c_spill" => self.c_spill = num(key, value)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key '{key}' (known: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Checks every module precondition that depends only on the config.
    pub fn validate(&self) -> Result<()> {
        let w = self.weight_range;
        if w < 2 || !w.is_power_of_two() {
            return Err(Error::Config(format!("W = {w} must be a power of two >= 2")));
        }
        if w > 1 << 15 {
            return Err(Error::Config(format!("W = {w} too large: W^4 must fit in 64 bits")));
        }
        if self.universe < 1 {
            return Err(Error::Config("U must be at least 1".into()));
        }
        if self.universe > 1 << 48 {
            return Err(Error::Config("U must be at most 2^48".into()));
        }
        if self.nmax < 1 {
            return Err(Error::Config("nmax must be at least 1".into()));
        }
        if self.a_count() < 2 {
            return Err(Error::Config("A_count must be at least 2".into()));
        }
        if self.q < 2 {
            return Err(Error::Config("q must be at least 2".into()));
        }
        for (name, v) in [
            ("delta_slack", self.delta_slack),
            ("delta_mid", self.delta_mid),
            ("delta_H", self.delta_h),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a finite nonnegative number")));
            }
        }
        if self.t_fail() >= w {
            return Err(Error::Config(format!("T_fail = {} must be below W = {w}", self.t_fail())));
        }
        if !(8..=100).contains(&self.frac_bits) {
            return Err(Error::Config("F must lie in [8, 100]".into()));
        }
        if self.c_spill < 2 {
            return Err(Error::Config("c_spill must be at least 2".into()));
        }
        if let Some(b) = self.block {
            if b < 1 {
                return Err(Error::Config("B must be at least 1".into()));
            }
        }
        Ok(())
    }

    pub fn a_count(&self) -> u64 {
        self.a_count.unwrap_or(self.weight_range * self.weight_range)
    }

    pub fn t_fail(&self) -> u64 {
        self.t_fail.unwrap_or_else(|| (self.weight_range / (16 * self.nmax)).max(1))
    }

    pub fn delta_slack_cost(&self) -> BitCost {
        BitCost::from_f64(self.delta_slack, self.frac_bits, Rounding::Up)
    }

    pub fn delta_mid_cost(&self) -> BitCost {
        BitCost::from_f64(self.delta_mid, self.frac_bits, Rounding::Up)
    }

    pub fn delta_h_cost(&self) -> BitCost {
        BitCost::from_f64(self.delta_h, self.frac_bits, Rounding::Down)
    }

    /// Canonical `key = value` rendering; also the input of [`Config::hash`].
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<u64>| v.map_or_else(|| "auto".to_string(), |x| x.to_string());
        let _ = writeln!(s, "U = {}", self.universe);
        let _ = writeln!(s, "nmax = {}", self.nmax);
        let _ = writeln!(s, "W = {}", self.weight_range);
        let _ = writeln!(s, "A_count = {}", opt(self.a_count));
        let _ = writeln!(s, "q = {}", self.q);
        let _ = writeln!(s, "delta_slack = {}", self.delta_slack);
        let _ = writeln!(s, "delta_mid = {}", self.delta_mid);
        let _ = writeln!(s, "delta_H = {}", self.delta_h);
        let _ = writeln!(s, "T_fail = {}", opt(self.t_fail));
        let _ = writeln!(s, "B = {}", opt(self.block));
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "F = {}", self.frac_bits);
        let _ = writeln!(s, "c_spill = {}", self.c_spill);
        s
    }

    /// Short hex digest identifying this configuration in reports and snapshots.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_kv_string().as_bytes());
        hex::encode(&digest[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_text() {
        let mut cfg = Config::default();
        cfg.set("W", "64").unwrap();
        cfg.set("U", "2^16").unwrap();
        let back = Config::from_kv_str(&cfg.to_kv_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn rejects_bad_values() {
        let mut cfg = Config::default();
        cfg.weight_range = 12;
        assert!(cfg.validate().is_err());
        assert!(Config::from_kv_str("bogus = 1").is_err());
    }

    #[test]
    fn derived_defaults() {
        let cfg = Config::default();
        assert_eq!(cfg.a_count(), 256);
        assert_eq!(cfg.t_fail(), 1);
        cfg.validate().unwrap();
    }
}
