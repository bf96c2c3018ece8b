use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::CouplingMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MultiScale {
    /// Half of the channels leave after the single block of each level.
    Original,
    /// Two blocks per level, each followed by a quarter split.
    FineGrained,
}

impl MultiScale {
    /// Split denominator `M`.
    pub fn m(self) -> usize {
        match self {
            MultiScale::Original => 2,
            MultiScale::FineGrained => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DequantMode {
    Uniform,
    Variational,
}

impl DequantMode {
    pub fn name(self) -> &'static str {
        match self {
            DequantMode::Uniform => "unif",
            DequantMode::Variational => "var",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "unif" | "uniform" => Ok(DequantMode::Uniform),
            "var" | "variational" => Ok(DequantMode::Variational),
            _ => Err(Error::Config(format!("unknown dequantization mode {s:?}"))),
        }
    }
}

/// Everything needed to build a model and its dequantizer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub levels: usize,
    /// Per level, the number of steps in each block.
    pub depths: Vec<Vec<usize>>,
    pub multiscale: MultiScale,
    pub coupling: CouplingMode,
    pub hidden_channels: usize,
    /// Kernel of the vertical masks; horizontal masks use the transpose.
    pub kernel: (usize, usize),
    pub units_per_step: usize,
    /// `(h, w, c)`
    pub image: (usize, usize, usize),
    pub n_bits: u32,
    pub dequant: DequantMode,
    pub dequant_units: usize,
    pub dequant_hidden_channels: usize,
    pub dequant_context_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: 2,
            depths: vec![vec![2, 2], vec![2]],
            multiscale: MultiScale::FineGrained,
            coupling: CouplingMode::Affine,
            hidden_channels: 32,
            kernel: (2, 5),
            units_per_step: 2,
            image: (8, 8, 1),
            n_bits: 5,
            dequant: DequantMode::Variational,
            dequant_units: 2,
            dequant_hidden_channels: 16,
            dequant_context_channels: 8,
        }
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {v:?}")))
}

fn parse_pair(key: &str, v: &str, sep: char) -> Result<(usize, usize)> {
    let parts: Vec<&str> = v.split(sep).collect();
    if parts.len() != 2 {
        return Err(Error::Config(format!("{key}: expected AxB, got {v:?}")));
    }
    Ok((parse_usize(key, parts[0])?, parse_usize(key, parts[1])?))
}

/// Parses `[[2,2],2]`: each top-level entry is a level, either a list of
/// block depths or a single block depth.
pub fn parse_depths(v: &str) -> Result<Vec<Vec<usize>>> {
    let bad = || Error::Config(format!("depths: cannot parse {v:?}"));
    let s: String = v.chars().filter(|c| !c.is_whitespace()).collect();
    let inner = s
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(bad)?;
    let mut levels = Vec::new();
    let mut rest = inner;
    while !rest.is_empty() {
        if let Some(r) = rest.strip_prefix('[') {
            let end = r.find(']').ok_or_else(bad)?;
            let blocks = r[..end]
                .split(',')
                .map(|b| parse_usize("depths", b))
                .collect::<Result<Vec<_>>>()?;
            levels.push(blocks);
            rest = &r[end + 1..];
        } else {
            let end = rest.find(',').unwrap_or(rest.len());
            levels.push(vec![parse_usize("depths", &rest[..end])?]);
            rest = &rest[end..];
        }
        rest = match rest.strip_prefix(',') {
            Some(r) if !r.is_empty() => r,
            Some(_) => return Err(bad()),
            None if rest.is_empty() => rest,
            None => return Err(bad()),
        };
    }
    Ok(levels)
}

fn format_depths(d: &[Vec<usize>]) -> String {
    let parts: Vec<String> = d
        .iter()
        .map(|blocks| {
            if blocks.len() == 1 {
                blocks[0].to_string()
            } else {
                let b: Vec<String> = blocks.iter().map(|x| x.to_string()).collect();
                format!("[{}]", b.join(","))
            }
        })
        .collect();
    format!("[{}]", parts.join(","))
}

impl ModelConfig {
    /// Parses flat `key = value` text; `#` starts a comment. Missing keys keep
    /// their defaults, unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "levels" => cfg.levels = parse_usize(key, value)?,
                "depths" => cfg.depths = parse_depths(value)?,
                "multiscale" => {
                    cfg.multiscale = match value {
                        "original" => MultiScale::Original,
                        "fine_grained" => MultiScale::FineGrained,
                        _ => {
                            return Err(Error::Config(format!(
                                "multiscale: unknown value {value:?}"
                            )))
                        }
                    }
                }
                "coupling" => {
                    cfg.coupling = match value {
                        "affine" => CouplingMode::Affine,
                        "additive" => CouplingMode::Additive,
                        _ => {
                            return Err(Error::Config(format!("coupling: unknown value {value:?}")))
                        }
                    }
                }
                "hidden_channels" => cfg.hidden_channels = parse_usize(key, value)?,
                "kernel" => cfg.kernel = parse_pair(key, value, 'x')?,
                "units_per_step" => cfg.units_per_step = parse_usize(key, value)?,
                "image" => {
                    let parts: Vec<&str> = value.split('x').collect();
                    if parts.len() != 3 {
                        return Err(Error::Config(format!(
                            "image: expected HxWxC, got {value:?}"
                        )));
                    }
                    cfg.image = (
                        parse_usize(key, parts[0])?,
                        parse_usize(key, parts[1])?,
                        parse_usize(key, parts[2])?,
                    );
                }
                "n_bits" => cfg.n_bits = parse_usize(key, value)? as u32,
                "dequant" => cfg.dequant = DequantMode::parse(value)?,
                "dequant_units" => cfg.dequant_units = parse_usize(key, value)?,
                "dequant_hidden_channels" => cfg.dequant_hidden_channels = parse_usize(key, value)?,
                "dequant_context_channels" => {
                    cfg.dequant_context_channels = parse_usize(key, value)?
                }
                _ => return Err(Error::Config(format!("unknown key {key:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        ModelConfig::parse(&std::fs::read_to_string(path)?)
    }

    pub fn dims(&self) -> usize {
        self.image.0 * self.image.1 * self.image.2
    }

    /// Checks level/block counts, channel divisibility and spatial halving.
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.levels == 0 {
            return err("levels must be at least 1".into());
        }
        if self.depths.len() != self.levels {
            return err(format!(
                "depths lists {} levels but levels = {}",
                self.depths.len(),
                self.levels
            ));
        }
        let half_m = self.multiscale.m() / 2;
        for (l, blocks) in self.depths.iter().enumerate() {
            let last = l + 1 == self.levels;
            let ok = if last {
                (1..=half_m).contains(&blocks.len())
            } else {
                blocks.len() == half_m
            };
            if !ok {
                return err(format!(
                    "level {l} has {} blocks; M = {} needs {half_m}{}",
                    blocks.len(),
                    self.multiscale.m(),
                    if last { " or fewer" } else { "" }
                ));
            }
            if blocks.iter().any(|&d| d == 0) {
                return err(format!("level {l} has an empty block"));
            }
        }
        if !(1..=8).contains(&self.n_bits) {
            return err(format!("n_bits must be in 1..=8, got {}", self.n_bits));
        }
        if self.hidden_channels == 0 || self.kernel.0 == 0 || self.kernel.1 == 0 {
            return err("hidden_channels and kernel extents must be positive".into());
        }
        let (mut h, mut w, mut c) = self.image;
        if c == 0 {
            return err("image needs at least one channel".into());
        }
        let m = self.multiscale.m();
        for (l, blocks) in self.depths.iter().enumerate() {
            if h % 2 != 0 || w % 2 != 0 {
                return err(format!(
                    "level {l}: cannot squeeze odd spatial size {h}x{w}"
                ));
            }
            h /= 2;
            w /= 2;
            c *= 4;
            let level_c = c;
            let splits = if l + 1 == self.levels {
                blocks.len() - 1
            } else {
                blocks.len()
            };
            if splits > 0 && level_c % m != 0 {
                return err(format!(
                    "level {l}: {level_c} channels not divisible by M = {m}"
                ));
            }
            c -= splits * (level_c / m);
        }
        if self.dequant == DequantMode::Variational {
            if self.dequant_hidden_channels == 0 || self.dequant_context_channels == 0 {
                return err("dequantizer channel counts must be positive".into());
            }
            if self.image.0 % 2 != 0 || self.image.1 % 2 != 0 {
                return err("variational dequantizer needs even image extents".into());
            }
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        format!(
            "levels = {}\ndepths = {}\nmultiscale = {}\ncoupling = {}\nhidden_channels = {}\n\
             kernel = {}x{}\nunits_per_step = {}\nimage = {}x{}x{}\nn_bits = {}\ndequant = {}\n\
             dequant_units = {}\ndequant_hidden_channels = {}\ndequant_context_channels = {}\n",
            self.levels,
            format_depths(&self.depths),
            match self.multiscale {
                MultiScale::Original => "original",
                MultiScale::FineGrained => "fine_grained",
            },
            self.coupling,
            self.hidden_channels,
            self.kernel.0,
            self.kernel.1,
            self.units_per_step,
            self.image.0,
            self.image.1,
            self.image.2,
            self.n_bits,
            self.dequant.name(),
            self.dequant_units,
            self.dequant_hidden_channels,
            self.dequant_context_channels,
        )
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depths_notation() {
        assert_eq!(
            parse_depths("[[2,2],2]").unwrap(),
            vec![vec![2, 2], vec![2]]
        );
        assert_eq!(parse_depths("[1]").unwrap(), vec![vec![1]]);
        assert_eq!(
            parse_depths("[ [4, 4], [8,8], 2 ]").unwrap(),
            vec![vec![4, 4], vec![8, 8], vec![2]]
        );
        assert!(parse_depths("[[2,2],]").is_err());
        assert!(parse_depths("2,2").is_err());
        assert!(parse_depths("[[2,x]]").is_err());
    }

    #[test]
    fn text_roundtrip() {
        let cfg = ModelConfig::default();
        assert_eq!(ModelConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_defaults() {
        let cfg = ModelConfig::parse(
            "# toy\nlevels = 1 # one level\ndepths = [1]\nmultiscale = original\n",
        )
        .unwrap();
        assert_eq!(cfg.levels, 1);
        assert_eq!(cfg.depths, vec![vec![1]]);
        assert_eq!(cfg.hidden_channels, 32);
    }

    #[test]
    fn unknown_key_is_error() {
        assert!(matches!(
            ModelConfig::parse("colour = red\n"),
            Err(Error::Config(_))
        ));
        assert!(ModelConfig::parse("levels 2\n").is_err());
    }

    #[test]
    fn block_counts_checked() {
        let bad = "levels = 2\ndepths = [2,2]\nmultiscale = fine_grained\n";
        assert!(ModelConfig::parse(bad).is_err());
        let ok = "levels = 2\ndepths = [2,2]\nmultiscale = original\n";
        assert!(ModelConfig::parse(ok).is_ok());
    }

    #[test]
    fn odd_squeeze_rejected() {
        assert!(ModelConfig::parse("image = 6x6x1\nlevels = 2\ndepths = [[1,1],1]\n").is_err());
        assert!(ModelConfig::parse("image = 4x4x1\nlevels = 1\ndepths = [[1,1]]\n").is_ok());
    }
}
