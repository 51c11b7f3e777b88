use std::fmt;

use num_rational::Ratio;

use crate::error::{ensure, Error, Result};

/// Total inverse parameters for `n` equal-sized stages of a `p`-parameter
/// forward model: one full-path inverse per stage versus one modular
/// component per stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BudgetResult {
    pub n: u64,
    pub p: u64,
    pub full_path_total: Ratio<u64>,
    pub modular_total: Ratio<u64>,
}

/// A full-path inverse from stage `i` spans `i` stages of `p/n` parameters,
/// so the total is `(n·p + p) / 2`; the modular components add up to `p`.
pub fn parameter_budget(n: u64, p: u64) -> Result<BudgetResult> {
    ensure!(n >= 1, "stage count must be at least 1");
    let overflow = || Error::Contract(format!("budget for n={n}, p={p} overflows u64"));
    let np = n.checked_mul(p).ok_or_else(overflow)?;
    let full = np.checked_add(p).ok_or_else(overflow)?;
    Ok(BudgetResult { n, p, full_path_total: Ratio::new(full, 2), modular_total: Ratio::from_integer(p) })
}

fn show(r: &Ratio<u64>) -> String {
    if r.is_integer() {
        r.to_integer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

impl fmt::Display for BudgetResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "full_path={} modular={}", show(&self.full_path_total), show(&self.modular_total))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_forms() {
        assert_eq!(parameter_budget(4, 1000).unwrap().to_string(), "full_path=2500 modular=1000");
        assert_eq!(parameter_budget(2, 1).unwrap().to_string(), "full_path=3/2 modular=1");
        assert!(parameter_budget(0, 5).is_err());
        assert!(parameter_budget(u64::MAX, 2).is_err());
    }
}
