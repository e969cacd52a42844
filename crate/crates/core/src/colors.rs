//! Map colors for traffic densities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BIN_WIDTH: f64 = 0.05;
pub const DEFAULT_PALETTE: [&str; 5] = ["black", "blue", "green", "yellow", "red"];

/// Relative slack so that values printed at a bin boundary (0.05, 0.1, ...)
/// land in the upper bin despite binary rounding of `value / width`.
const BOUNDARY_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorBinning {
    pub bin_width: f64,
    pub palette: Vec<String>,
}

impl Default for ColorBinning {
    fn default() -> Self {
        ColorBinning {
            bin_width: DEFAULT_BIN_WIDTH,
            palette: DEFAULT_PALETTE.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl ColorBinning {
    pub fn new(bin_width: f64) -> Result<Self> {
        let b = ColorBinning {
            bin_width,
            ..Default::default()
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bin_width > 0.0 && self.bin_width.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "bin width must be positive, got {}",
                self.bin_width
            )));
        }
        if self.palette.is_empty() {
            return Err(Error::InvalidParameter("palette is empty".into()));
        }
        Ok(())
    }

    /// `floor(value / width)`, clamped to the last palette entry.
    pub fn bin_index(&self, value: f64) -> Result<usize> {
        if !(value >= 0.0 && value.is_finite()) {
            return Err(Error::Domain(format!(
                "density must be finite and nonnegative, got {value}"
            )));
        }
        let scaled = value / self.bin_width;
        let bin = (scaled * (1.0 + BOUNDARY_SLACK)).floor();
        let last = self.palette.len() - 1;
        Ok(if bin >= last as f64 {
            last
        } else {
            bin as usize
        })
    }

    pub fn color(&self, value: f64) -> Result<(usize, &str)> {
        let i = self.bin_index(value)?;
        Ok((i, &self.palette[i]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundaries() {
        let b = ColorBinning::default();
        assert_eq!(b.color(0.0).unwrap(), (0, "black"));
        assert_eq!(b.color(0.049999).unwrap(), (0, "black"));
        assert_eq!(b.color(0.05).unwrap(), (1, "blue"));
        assert_eq!(b.color(0.1).unwrap(), (2, "green"));
        assert_eq!(b.color(0.15).unwrap(), (3, "yellow"));
        assert_eq!(b.color(0.2).unwrap(), (4, "red"));
        assert_eq!(b.color(10.0 * b.bin_width).unwrap(), (4, "red"));
        assert_eq!(b.color(1e9).unwrap(), (4, "red"));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ColorBinning::new(0.0).is_err());
        assert!(ColorBinning::default().bin_index(-0.1).is_err());
        assert!(ColorBinning::default().bin_index(f64::NAN).is_err());
    }
}
