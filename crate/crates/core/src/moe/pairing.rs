//! Expert sizing under the pair-sum constraint.
//!
//! Experts come in pairs whose hidden sizes average to the homogeneous size
//! `h_base`. The flattened order is `pair0.large, pair0.small, pair1.large, …`,
//! so experts `2p` and `2p + 1` always form pair `p`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const RATIO_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct PairedExpertSpec {
    pub d_model: usize,
    pub h_base: usize,
    pub pairs: Vec<(usize, usize)>,
    pub expert_sizes: Vec<usize>,
}

#[derive(Deserialize)]
struct RawSpec {
    d_model: usize,
    h_base: usize,
    pairs: Vec<(usize, usize)>,
}

impl TryFrom<RawSpec> for PairedExpertSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        Self::from_pairs(raw.d_model, raw.h_base, raw.pairs)
    }
}

impl PairedExpertSpec {
    /// Builds a spec from explicit hidden sizes, checking the pair-sum rule.
    pub fn from_pairs(d_model: usize, h_base: usize, pairs: Vec<(usize, usize)>) -> Result<Self> {
        if d_model == 0 || h_base == 0 {
            return Err(Error::Config("d_model and h_base must be positive".into()));
        }
        if pairs.is_empty() {
            return Err(Error::Config("at least one expert pair is required".into()));
        }
        let mut ordered = Vec::with_capacity(pairs.len());
        for (i, &(a, b)) in pairs.iter().enumerate() {
            let (large, small) = if a >= b { (a, b) } else { (b, a) };
            if small == 0 {
                return Err(Error::Constraint(format!(
                    "pair {i} ({a}, {b}) has a zero-width expert"
                )));
            }
            if large + small != 2 * h_base {
                return Err(Error::Constraint(format!(
                    "pair {i} ({a}, {b}) sums to {}, expected 2·{h_base} = {}",
                    large + small,
                    2 * h_base
                )));
            }
            ordered.push((large, small));
        }
        let expert_sizes = ordered.iter().flat_map(|&(l, s)| [l, s]).collect();
        Ok(Self {
            d_model,
            h_base,
            pairs: ordered,
            expert_sizes,
        })
    }

    /// `n_experts` experts of width `h_base` (`n_experts` must be even).
    pub fn homogeneous(d_model: usize, h_base: usize, n_experts: usize) -> Result<Self> {
        if n_experts < 2 || n_experts % 2 != 0 {
            return Err(Error::Config(format!(
                "expert count must be even and >= 2, got {n_experts}"
            )));
        }
        Self::from_pairs(d_model, h_base, vec![(h_base, h_base); n_experts / 2])
    }

    pub fn n_experts(&self) -> usize {
        self.expert_sizes.len()
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// Pair index that expert `e` belongs to.
    pub fn pair_of(expert: usize) -> usize {
        expert / 2
    }

    pub fn is_homogeneous(&self) -> bool {
        self.expert_sizes.iter().all(|&s| s == self.h_base)
    }

    /// Size expressed as a multiple of `d_model`, e.g. `4.5`.
    pub fn ratio(&self, expert: usize) -> f64 {
        self.expert_sizes[expert] as f64 / self.d_model as f64
    }

    /// Column label used in rendered tables: `4.5`, `4`, `0.5`, ...
    pub fn ratio_label(&self, expert: usize) -> String {
        format_ratio(self.ratio(expert))
    }

    /// Short stable digest identifying the spec inside trace headers.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("spec serializes");
        let hash = Sha256::digest(canonical.as_bytes());
        hex::encode(&hash[..8])
    }
}

pub(crate) fn format_ratio(r: f64) -> String {
    let s = format!("{r:.4}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Builds a spec from size ratios relative to `d_model`.
pub fn build_paired_spec(
    d_model: usize,
    h_base: usize,
    ratios: &[(f64, f64)],
) -> Result<PairedExpertSpec> {
    if d_model == 0 {
        return Err(Error::Config("d_model must be positive".into()));
    }
    let target = 2.0 * h_base as f64 / d_model as f64;
    let to_size = |i: usize, r: f64| -> Result<usize> {
        let width = r * d_model as f64;
        let rounded = width.round();
        if rounded < 1.0 || (width - rounded).abs() > 1e-6 {
            return Err(Error::Constraint(format!(
                "pair {i}: ratio {r} × {d_model} = {width} is not a positive integer width"
            )));
        }
        Ok(rounded as usize)
    };
    let mut pairs = Vec::with_capacity(ratios.len());
    for (i, &(a, b)) in ratios.iter().enumerate() {
        if (a + b - target).abs() > RATIO_TOL {
            return Err(Error::Constraint(format!(
                "pair {i} ({a}, {b}) sums to {}, expected 2·h/d = {target}",
                a + b
            )));
        }
        pairs.push((to_size(i, a)?, to_size(i, b)?));
    }
    PairedExpertSpec::from_pairs(d_model, h_base, pairs)
}

/// Expert sizing of a model config: either paired ratios or all-equal experts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RatiosRepr", into = "RatiosRepr")]
pub enum ExpertRatios {
    Homogeneous,
    Pairs(Vec<(f64, f64)>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RatiosRepr {
    Name(String),
    Pairs(Vec<(f64, f64)>),
}

impl TryFrom<RatiosRepr> for ExpertRatios {
    type Error = Error;

    fn try_from(r: RatiosRepr) -> Result<Self> {
        match r {
            RatiosRepr::Name(s) => s.parse(),
            RatiosRepr::Pairs(p) => Ok(ExpertRatios::Pairs(p)),
        }
    }
}

impl From<ExpertRatios> for RatiosRepr {
    fn from(r: ExpertRatios) -> Self {
        match r {
            ExpertRatios::Homogeneous => RatiosRepr::Name("homogeneous".into()),
            ExpertRatios::Pairs(p) => RatiosRepr::Pairs(p),
        }
    }
}

impl ExpertRatios {
    /// The four size pairs `(4.5, 0.5), (4, 1), (3, 2), (2.5, 2.5)`.
    pub fn diverse_default() -> Self {
        ExpertRatios::Pairs(vec![(4.5, 0.5), (4.0, 1.0), (3.0, 2.0), (2.5, 2.5)])
    }

    pub fn to_spec(&self, d_model: usize, h_base: usize, n_experts: usize) -> Result<PairedExpertSpec> {
        match self {
            ExpertRatios::Homogeneous => PairedExpertSpec::homogeneous(d_model, h_base, n_experts),
            ExpertRatios::Pairs(p) => {
                if p.len() * 2 != n_experts {
                    return Err(Error::Config(format!(
                        "{} ratio pairs give {} experts, config asks for {n_experts}",
                        p.len(),
                        p.len() * 2
                    )));
                }
                build_paired_spec(d_model, h_base, p)
            }
        }
    }
}

impl FromStr for ExpertRatios {
    type Err = Error;

    /// Accepts `homogeneous` or `large:small,large:small,...`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("homogeneous") {
            return Ok(ExpertRatios::Homogeneous);
        }
        let bad = || Error::Config(format!("cannot parse expert ratios {s:?}"));
        let pairs = s
            .split(',')
            .map(|p| {
                let (a, b) = p.split_once(':').ok_or_else(bad)?;
                let a: f64 = a.trim().parse().map_err(|_| bad())?;
                let b: f64 = b.trim().parse().map_err(|_| bad())?;
                Ok((a, b))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ExpertRatios::Pairs(pairs))
    }
}

impl fmt::Display for ExpertRatios {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExpertRatios::Homogeneous => write!(f, "homogeneous"),
            ExpertRatios::Pairs(p) => {
                let parts: Vec<String> = p
                    .iter()
                    .map(|(a, b)| format!("{}:{}", format_ratio(*a), format_ratio(*b)))
                    .collect();
                write!(f, "{}", parts.join(","))
            }
        }
    }
}
