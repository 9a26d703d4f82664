//! Model hyperparameters and the flat `key = value` config file format.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::TcpLossLevels;

/// Encoder depth is the length of `level_widths` (up to 4); each level
/// downsamples by 4 and `ball_radii` must match in length.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_input: usize,
    pub level_widths: Vec<usize>,
    pub ball_radii: Vec<f64>,
    pub k: usize,
    pub n_classes: usize,
    pub m: usize,
    pub seed: u64,
    pub tcp_loss_levels: TcpLossLevels,
}

impl Default for ModelConfig {
    /// Desk-scale default: 1024 input points. Full scale raises `n_input`
    /// to 10_000 (level sizes then follow floor division).
    fn default() -> Self {
        ModelConfig {
            n_input: 1024,
            level_widths: vec![32, 64, 128, 256],
            ball_radii: vec![0.1, 0.2, 0.4, 0.8],
            k: 16,
            n_classes: 17,
            m: 16,
            seed: 0,
            tcp_loss_levels: TcpLossLevels::All,
        }
    }
}

/// Successive floor-by-4 cardinalities, one per level.
pub fn level_sizes(n_input: usize, depth: usize) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(depth);
    let mut n = n_input;
    for _ in 0..depth {
        n /= 4;
        sizes.push(n);
    }
    sizes
}

impl ModelConfig {
    pub fn depth(&self) -> usize {
        self.level_widths.len()
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        level_sizes(self.n_input, self.depth())
    }

    pub fn validate(&self) -> Result<()> {
        if self.level_widths.is_empty() || self.level_widths.len() > 4 {
            return Err(Error::Contract {
                op: "model_config",
                msg: format!("{} levels outside 1..=4", self.level_widths.len()),
            });
        }
        if self.ball_radii.len() != self.level_widths.len() {
            return Err(Error::Contract {
                op: "model_config",
                msg: format!(
                    "{} radii for {} levels",
                    self.ball_radii.len(),
                    self.level_widths.len()
                ),
            });
        }
        if self.level_widths.iter().any(|&w| w == 0) {
            return Err(Error::Contract {
                op: "model_config",
                msg: "zero level width".to_string(),
            });
        }
        if self.ball_radii.iter().any(|&r| r <= 0.0) {
            return Err(Error::Contract {
                op: "model_config",
                msg: "non-positive ball radius".to_string(),
            });
        }
        if self.n_classes < 2 {
            return Err(Error::Contract {
                op: "model_config",
                msg: format!("n_classes {} < 2", self.n_classes),
            });
        }
        if self.k == 0 || self.m == 0 {
            return Err(Error::Contract {
                op: "model_config",
                msg: "k and m must be positive".to_string(),
            });
        }
        if self.level_sizes().last().copied().unwrap_or(0) == 0 {
            return Err(Error::Contract {
                op: "model_config",
                msg: format!(
                    "n_input {} leaves an empty level (sizes {:?})",
                    self.n_input,
                    self.level_sizes()
                ),
            });
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let widths: Vec<String> = self.level_widths.iter().map(|w| w.to_string()).collect();
        let radii: Vec<String> = self.ball_radii.iter().map(|r| r.to_string()).collect();
        format!(
            "n_input = {}\nlevel_widths = {}\nball_radii = {}\nk = {}\nn_classes = {}\nm = {}\nseed = {}\ntcp_loss_levels = {}\n",
            self.n_input,
            widths.join(","),
            radii.join(","),
            self.k,
            self.n_classes,
            self.m,
            self.seed,
            match self.tcp_loss_levels {
                TcpLossLevels::All => "all",
                TcpLossLevels::Last => "last",
            }
        )
    }
}

/// Parses `key = value` lines ('#' starts a comment); unknown keys are
/// rejected with their line number. Missing keys keep defaults.
pub fn parse_config(text: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: lineno,
            msg: format!("expected 'key = value', got {raw:?}"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        let parse_usize = |v: &str| -> Result<usize> {
            v.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad integer {v:?} for {key}"),
            })
        };
        match key {
            "n_input" => cfg.n_input = parse_usize(value)?,
            "k" => cfg.k = parse_usize(value)?,
            "n_classes" => cfg.n_classes = parse_usize(value)?,
            "m" => cfg.m = parse_usize(value)?,
            "seed" => {
                cfg.seed = value.parse().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("bad seed {value:?}"),
                })?
            }
            "level_widths" => {
                cfg.level_widths = value
                    .split(',')
                    .map(|v| parse_usize(v.trim()))
                    .collect::<Result<Vec<_>>>()?
            }
            "ball_radii" => {
                cfg.ball_radii = value
                    .split(',')
                    .map(|v| {
                        v.trim().parse::<f64>().map_err(|_| Error::Parse {
                            line: lineno,
                            msg: format!("bad float {v:?} for ball_radii"),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            "tcp_loss_levels" => {
                cfg.tcp_loss_levels = match value {
                    "all" => TcpLossLevels::All,
                    "last" => TcpLossLevels::Last,
                    other => {
                        return Err(Error::Parse {
                            line: lineno,
                            msg: format!("tcp_loss_levels must be 'all' or 'last', got {other:?}"),
                        })
                    }
                }
            }
            other => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("unknown config key {other:?}"),
                })
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ModelConfig> {
    parse_config(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_size_chains() {
        assert_eq!(level_sizes(1024, 4), vec![256, 64, 16, 4]);
        assert_eq!(level_sizes(10_000, 4), vec![2500, 625, 156, 39]);
        assert_eq!(level_sizes(64, 2), vec![16, 4]);
    }

    #[test]
    fn default_validates() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn too_small_input_is_contract_error() {
        let cfg = ModelConfig {
            n_input: 100,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Contract { .. })));
    }

    #[test]
    fn round_trips_through_text() {
        let cfg = ModelConfig {
            n_input: 512,
            level_widths: vec![16, 24],
            ball_radii: vec![0.25, 0.5],
            k: 8,
            n_classes: 9,
            m: 16,
            seed: 42,
            tcp_loss_levels: TcpLossLevels::Last,
        };
        let text = cfg.render();
        let back = parse_config(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn comments_and_unknown_keys() {
        let cfg = parse_config("# comment\nn_input = 512  # trailing\nlevel_widths=8,8\nball_radii=0.3,0.6\n").unwrap();
        assert_eq!(cfg.n_input, 512);
        assert_eq!(cfg.level_widths, vec![8, 8]);

        let err = parse_config("bogus_key = 1\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected {other}"),
        }
    }
}
