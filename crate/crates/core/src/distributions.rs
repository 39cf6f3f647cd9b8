//! Samplers for overdispersed clustered multinomial counts.
//!
//! All three families share `E[Y] = n p` and `Var[Y] = (1 + (n − 1)ρ²) n Σ_p`:
//!
//! * Dirichlet-multinomial, drawn by a stick-breaking Beta/Binomial cascade;
//! * `n`-inflated multinomial, a mixture of `M(n, p)` and `n·M(1, p)`;
//! * random-clumped, where `K ~ Bin(n, ρ)` units copy one shared draw.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Binomial, Distribution};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta as BetaLaw, ContinuousCDF};

use crate::data::{ClusterGroup, ClusterTable, ClusteredSample, ProportionVector};
use crate::error::{invalid, Error, Result};

/// Seedable source of the variates the samplers need.
///
/// The same seed always yields the same sequence of draws.
#[derive(Debug, Clone)]
pub struct RandomStream(ChaCha8Rng);

impl RandomStream {
    pub fn from_seed(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.0.random()
    }

    pub fn bernoulli(&mut self, q: f64) -> bool {
        self.uniform() < q
    }

    pub fn beta(&mut self, a: f64, b: f64) -> Result<f64> {
        let law = Beta::new(a, b).map_err(|e| Error::InvalidInput(format!("Beta({a}, {b}): {e}")))?;
        Ok(law.sample(&mut self.0))
    }

    pub fn binomial(&mut self, n: u64, q: f64) -> Result<u64> {
        if n == 0 {
            return Ok(0);
        }
        let law = Binomial::new(n, q.clamp(0.0, 1.0))
            .map_err(|e| Error::InvalidInput(format!("Bin({n}, {q}): {e}")))?;
        Ok(law.sample(&mut self.0))
    }

    /// One categorical draw by inverse CDF over `p` in cell order.
    pub fn categorical(&mut self, p: &ProportionVector) -> usize {
        let u = self.uniform();
        let mut cumulative = 0.0;
        for (r, &pr) in p.iter().enumerate() {
            cumulative += pr;
            if u < cumulative {
                return r;
            }
        }
        // rounding left the total just below u; fall back to the last live cell
        p.iter().rposition(|&pr| pr > 0.0).unwrap_or(p.len() - 1)
    }

    /// `M(n, p)` by a sequence of conditional binomials.
    pub fn multinomial(&mut self, n: u64, p: &ProportionVector) -> Result<Vec<u64>> {
        let m = p.len();
        let mut counts = vec![0u64; m];
        let mut left = n;
        let mut mass = 1.0;
        for r in 0..m - 1 {
            if left == 0 {
                break;
            }
            let q = if mass > 0.0 { p[r] / mass } else { 0.0 };
            counts[r] = self.binomial(left, q)?;
            left -= counts[r];
            mass -= p[r];
        }
        counts[m - 1] += left;
        Ok(counts)
    }
}

/// Mixes a master seed with a path of indices into a stream seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(master), |acc, &k| splitmix(acc ^ splitmix(k)))
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DistributionKind {
    #[serde(rename = "dm")]
    DirichletMultinomial,
    #[serde(rename = "ni")]
    NInflated,
    #[serde(rename = "rc")]
    RandomClumped,
}

impl DistributionKind {
    pub const ALL: [DistributionKind; 3] = [
        Self::DirichletMultinomial,
        Self::NInflated,
        Self::RandomClumped,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            Self::DirichletMultinomial => "dm",
            Self::NInflated => "ni",
            Self::RandomClumped => "rc",
        }
    }

    pub fn from_short_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.short_name() == name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown distribution {name:?}; use dm, ni or rc")))
    }

    fn index(self) -> u64 {
        self as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverdispersionParams {
    /// Cluster size.
    pub n: u64,
    pub p: ProportionVector,
    /// Intracluster correlation.
    pub rho2: f64,
}

impl OverdispersionParams {
    pub fn new(n: u64, p: ProportionVector, rho2: f64) -> Result<Self> {
        if n == 0 {
            return invalid("cluster size must be positive");
        }
        if !(0.0..=1.0).contains(&rho2) {
            return invalid(format!("rho^2 must lie in [0, 1], got {rho2}"));
        }
        if p.len() < 2 {
            return invalid("at least 2 cells are needed");
        }
        Ok(Self { n, p, rho2 })
    }

    /// Design effect `1 + (n − 1)ρ²`.
    pub fn design_effect(&self) -> f64 {
        1.0 + (self.n as f64 - 1.0) * self.rho2
    }
}

fn table(counts: Vec<u64>, n: u64) -> Result<ClusterTable> {
    ClusterTable::with_size(counts, n)
}

/// Dirichlet-multinomial draw with `α_r = ((1 − ρ²)/ρ²) p_r`.
pub fn sample_dirichlet_multinomial(
    params: &OverdispersionParams,
    stream: &mut RandomStream,
) -> Result<ClusterTable> {
    let rho2 = params.rho2;
    if !(rho2 > 0.0 && rho2 < 1.0) {
        return invalid(format!(
            "Dirichlet-multinomial needs 0 < rho^2 < 1, got {rho2}; use a multinomial for rho^2 = 0"
        ));
    }
    if !params.p.is_strictly_positive() {
        return invalid("Dirichlet-multinomial needs strictly positive cell probabilities");
    }
    let c = (1.0 - rho2) / rho2;
    let p = params.p.as_slice();
    let m = p.len();
    let mut counts = vec![0u64; m];
    let mut left = params.n;
    let mut tail: f64 = 1.0;
    for r in 0..m - 1 {
        tail -= p[r];
        // the remaining stick is Σ_{h>r} p_h; guard against rounding
        let rest: f64 = if tail > 0.0 { tail } else { p[r + 1..].iter().sum() };
        let b = stream.beta(c * p[r], c * rest)?;
        counts[r] = stream.binomial(left, b)?;
        left -= counts[r];
    }
    counts[m - 1] = left;
    table(counts, params.n)
}

/// `n`-inflated multinomial draw.
pub fn sample_n_inflated(params: &OverdispersionParams, stream: &mut RandomStream) -> Result<ClusterTable> {
    if stream.bernoulli(params.rho2) {
        let mut counts = vec![0u64; params.p.len()];
        counts[stream.categorical(&params.p)] = params.n;
        table(counts, params.n)
    } else {
        table(stream.multinomial(params.n, &params.p)?, params.n)
    }
}

/// Random-clumped draw with clumping probability `ρ = √ρ²`.
pub fn sample_random_clumped(params: &OverdispersionParams, stream: &mut RandomStream) -> Result<ClusterTable> {
    let shared = stream.categorical(&params.p);
    let k = stream.binomial(params.n, params.rho2.sqrt())?;
    let mut counts = stream.multinomial(params.n - k, &params.p)?;
    counts[shared] += k;
    table(counts, params.n)
}

pub fn sample(
    kind: DistributionKind,
    params: &OverdispersionParams,
    stream: &mut RandomStream,
) -> Result<ClusterTable> {
    match kind {
        DistributionKind::DirichletMultinomial => sample_dirichlet_multinomial(params, stream),
        DistributionKind::NInflated => sample_n_inflated(params, stream),
        DistributionKind::RandomClumped => sample_random_clumped(params, stream),
    }
}

/// Two-cell binomial with `n`-inflation of the second cell: with probability
/// `w` a `Bin(n, p₁)` table, otherwise `(0, n)`.
pub fn sample_zero_inflated_binomial(
    n: u64,
    w: f64,
    p1: f64,
    stream: &mut RandomStream,
) -> Result<ClusterTable> {
    check_unit_interval("w", w)?;
    check_unit_interval("p1", p1)?;
    let y1 = if stream.bernoulli(w) { stream.binomial(n, p1)? } else { 0 };
    table(vec![y1, n - y1], n)
}

fn check_unit_interval(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v < 1.0) {
        return invalid(format!("{name} must lie in (0, 1), got {v}"));
    }
    Ok(())
}

/// Intracluster correlation of the zero-inflated binomial,
/// `(1 − w) p₁ / (1 − w p₁)`.
pub fn zib_rho2(w: f64, p1: f64) -> Result<f64> {
    check_unit_interval("w", w)?;
    check_unit_interval("p1", p1)?;
    Ok((1.0 - w) * p1 / (1.0 - w * p1))
}

/// Draws `N_g` clusters of size `n_g` for every `(n_g, N_g)` in `layout`.
pub fn sample_clustered_dataset(
    layout: &[(u64, usize)],
    p: &ProportionVector,
    rho2: f64,
    kind: DistributionKind,
    stream: &mut RandomStream,
) -> Result<ClusteredSample> {
    if layout.is_empty() {
        return invalid("group layout is empty");
    }
    let mut groups = Vec::with_capacity(layout.len());
    for &(n, count) in layout {
        if count == 0 {
            return invalid("every group needs at least one cluster");
        }
        let params = OverdispersionParams::new(n, p.clone(), rho2)?;
        let tables = (0..count)
            .map(|_| sample(kind, &params, stream))
            .collect::<Result<Vec<_>>>()?;
        groups.push(ClusterGroup::new(tables)?);
    }
    ClusteredSample::new(groups)
}

/// Seed of the stream behind one replication of a simulation cell.
pub fn replication_seed(master: u64, kind: DistributionKind, grid_index: usize, replication: usize) -> u64 {
    derive_seed(master, &[kind.index(), grid_index as u64, replication as u64])
}

/// Outcome of a Kolmogorov–Smirnov check of the Beta generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsOutcome {
    pub statistic: f64,
    /// Rejection threshold for the statistic at the requested level.
    pub critical_value: f64,
    pub passed: bool,
}

/// Compares `draws` Beta(a, b) variates with the exact CDF, using the
/// asymptotic critical value `sqrt(−ln(α/2)/2)/√draws`.
pub fn beta_self_test(a: f64, b: f64, draws: usize, alpha: f64, seed: u64) -> Result<KsOutcome> {
    if draws == 0 {
        return invalid("need at least one draw");
    }
    check_unit_interval("alpha", alpha)?;
    let law = BetaLaw::new(a, b).map_err(|e| Error::InvalidInput(format!("Beta({a}, {b}): {e}")))?;
    let mut stream = RandomStream::from_seed(seed);
    let mut xs = (0..draws).map(|_| stream.beta(a, b)).collect::<Result<Vec<_>>>()?;
    xs.sort_by(f64::total_cmp);
    let n = draws as f64;
    // values below the smallest subnormal come back as 0.0, so a zero stands
    // for that whole interval; ties are compared once, on both sides of the step
    let cdf = |x: f64| law.cdf(if x > 0.0 { x } else { f64::from_bits(1) });
    let mut statistic: f64 = 0.0;
    let mut start = 0;
    while start < xs.len() {
        let end = start + xs[start..].iter().take_while(|&&x| x == xs[start]).count();
        let x = xs[start];
        let below = if x > 0.0 { law.cdf(x) } else { 0.0 };
        statistic = statistic
            .max((below - start as f64 / n).abs())
            .max((end as f64 / n - cdf(x)).abs());
        start = end;
    }
    let critical_value = (-(alpha / 2.0).ln() / 2.0).sqrt() / n.sqrt();
    Ok(KsOutcome {
        statistic,
        critical_value,
        passed: statistic <= critical_value,
    })
}
