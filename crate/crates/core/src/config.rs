//! Flat `key = value` pipeline configuration.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Config {
    pub patch_size: usize,
    pub stride: usize,
    pub cutoff_rho: f64,
    pub k_s: usize,
    pub clamp_px: f32,
    pub eps: f64,
    pub scales: usize,
    pub embed_dim: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            patch_size: 16,
            stride: 8,
            cutoff_rho: 0.25,
            k_s: 9,
            clamp_px: 8.0,
            eps: 1e-6,
            scales: 4,
            embed_dim: 32,
        }
    }
}

pub const KEYS: [&str; 8] = ["patch_size", "stride", "cutoff_rho", "k_s", "clamp_px", "eps", "scales", "embed_dim"];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}` has invalid value `{value}`")))
}

impl Config {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "patch_size" => self.patch_size = parse(key, value)?,
            "stride" => self.stride = parse(key, value)?,
            "cutoff_rho" => self.cutoff_rho = parse(key, value)?,
            "k_s" => self.k_s = parse(key, value)?,
            "clamp_px" => self.clamp_px = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "scales" => self.scales = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key `{other}` (expected one of {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn merge_text(mut self, text: &str) -> Result<Self> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1)))?;
            self.set(k, v)?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::default().merge_text(text)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.patch_size, 8 | 16 | 32) {
            return Err(Error::Config(format!("patch_size must be 8, 16 or 32, got {}", self.patch_size)));
        }
        if self.stride == 0 || self.patch_size % self.stride != 0 {
            return Err(Error::Config(format!("stride must divide patch_size, got {}", self.stride)));
        }
        if !(0.0 < self.cutoff_rho && self.cutoff_rho < 1.0) {
            return Err(Error::Config(format!("cutoff_rho must lie in (0, 1), got {}", self.cutoff_rho)));
        }
        let side = (self.k_s as f64).sqrt().round() as usize;
        if side * side != self.k_s || side % 2 == 0 {
            return Err(Error::Config(format!("k_s must be an odd perfect square, got {}", self.k_s)));
        }
        if !(self.clamp_px > 0.0 && self.clamp_px.is_finite()) {
            return Err(Error::Config(format!("clamp_px must be positive, got {}", self.clamp_px)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if !(1..=4).contains(&self.scales) {
            return Err(Error::Config(format!("scales must be between 1 and 4, got {}", self.scales)));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "patch_size = {}", self.patch_size);
        let _ = writeln!(s, "stride = {}", self.stride);
        let _ = writeln!(s, "cutoff_rho = {}", self.cutoff_rho);
        let _ = writeln!(s, "k_s = {}", self.k_s);
        let _ = writeln!(s, "clamp_px = {}", self.clamp_px);
        let _ = writeln!(s, "eps = {:e}", self.eps);
        let _ = writeln!(s, "scales = {}", self.scales);
        let _ = writeln!(s, "embed_dim = {}", self.embed_dim);
        s
    }
}
