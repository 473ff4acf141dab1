use std::fmt;
use std::str::FromStr;

use rand::distributions::Distribution as _;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Zipf;

use crate::error::BenchError;

/// Share of skewed draws that come from the Zipf component; the rest are
/// uniform over the domain.
pub const ZIPF_SHARE: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distribution {
    Uniform,
    /// Zipf with exponent `alpha` on value rank, mixed with a uniform
    /// background (see [`ZIPF_SHARE`]). Value 0 is the most popular.
    Zipf(f64),
}

impl FromStr for Distribution {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, BenchError> {
        if s == "uniform" {
            return Ok(Distribution::Uniform);
        }
        let alpha = s
            .strip_prefix("zipf:")
            .and_then(|a| a.parse::<f64>().ok())
            .ok_or_else(|| BenchError::Config(format!("unknown distribution {s:?}")))?;
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(BenchError::Config(format!("zipf exponent must be positive, got {alpha}")));
        }
        Ok(Distribution::Zipf(alpha))
    }
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Distribution::Uniform => write!(f, "uniform"),
            Distribution::Zipf(a) => write!(f, "zipf:{a}"),
        }
    }
}

/// Percentages of queries, updates, deletes and inserts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mix {
    pub query: u32,
    pub update: u32,
    pub delete: u32,
    pub insert: u32,
}

impl Default for Mix {
    fn default() -> Self {
        Mix {
            query: 90,
            update: 4,
            delete: 3,
            insert: 3,
        }
    }
}

impl FromStr for Mix {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, BenchError> {
        let parts: Vec<u32> = s
            .split(',')
            .map(|p| p.trim().parse::<u32>())
            .collect::<Result<_, _>>()
            .map_err(|e| BenchError::Config(format!("mix {s:?}: {e}")))?;
        let [query, update, delete, insert] = parts[..] else {
            return Err(BenchError::Config(format!("mix {s:?} needs four fields Q,U,D,I")));
        };
        let m = Mix {
            query,
            update,
            delete,
            insert,
        };
        m.validate()?;
        Ok(m)
    }
}

impl fmt::Display for Mix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.query, self.update, self.delete, self.insert)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Query,
    Update,
    Delete,
    Insert,
}

impl Mix {
    pub fn validate(&self) -> Result<(), BenchError> {
        let sum = self.query + self.update + self.delete + self.insert;
        if sum != 100 {
            return Err(BenchError::Config(format!("mix sums to {sum}, not 100")));
        }
        Ok(())
    }

    pub fn pick(&self, rng: &mut impl Rng) -> OpKind {
        let x = rng.gen_range(0..100);
        if x < self.query {
            OpKind::Query
        } else if x < self.query + self.update {
            OpKind::Update
        } else if x < self.query + self.update + self.delete {
            OpKind::Delete
        } else {
            OpKind::Insert
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub n_rows: u64,
    pub cardinality: u32,
    pub dist: Distribution,
    pub mix: Mix,
    /// Values covered by one range query; 1 means point queries.
    pub range_width: u32,
    pub threads: usize,
    /// Total operations across all workers.
    pub ops: u64,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            n_rows: 10_000_000,
            cardinality: 100,
            dist: Distribution::Uniform,
            mix: Mix::default(),
            range_width: 1,
            threads: 1,
            ops: 100_000,
            seed: 42,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        self.mix.validate()?;
        if self.cardinality == 0 {
            return Err(BenchError::Config("cardinality must be positive".into()));
        }
        if self.threads == 0 {
            return Err(BenchError::Config("need at least one worker thread".into()));
        }
        if self.range_width == 0 || self.range_width > self.cardinality {
            return Err(BenchError::Config(format!(
                "range width {} outside 1..={}",
                self.range_width, self.cardinality
            )));
        }
        if let Distribution::Zipf(a) = self.dist {
            if !(a > 0.0 && a.is_finite()) {
                return Err(BenchError::Config(format!("zipf exponent must be positive, got {a}")));
            }
        }
        Ok(())
    }
}

/// Draws values in `0..cardinality`.
#[derive(Debug, Clone)]
pub struct ValueSampler {
    card: u32,
    zipf: Option<Zipf<f64>>,
}

impl ValueSampler {
    pub fn new(card: u32, dist: Distribution) -> Result<Self, BenchError> {
        let zipf = match dist {
            Distribution::Uniform => None,
            Distribution::Zipf(a) => Some(Zipf::new(card as u64, a).map_err(|e| BenchError::Config(format!("zipf: {e}")))?),
        };
        Ok(ValueSampler { card, zipf })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> u32 {
        match &self.zipf {
            Some(z) if rng.gen_bool(ZIPF_SHARE) => z.sample(rng) as u32 - 1,
            _ => rng.gen_range(0..self.card),
        }
    }
}

/// The initial column. Deterministic in `spec.seed`.
pub fn generate(spec: &WorkloadSpec) -> Result<Vec<u32>, BenchError> {
    spec.validate()?;
    let sampler = ValueSampler::new(spec.cardinality, spec.dist)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..spec.n_rows).map(|_| sampler.sample(&mut rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: u64, card: u32, dist: Distribution) -> WorkloadSpec {
        WorkloadSpec {
            n_rows: n,
            cardinality: card,
            dist,
            ..WorkloadSpec::default()
        }
    }

    fn shares(vals: &[u32], card: u32) -> Vec<f64> {
        let mut c = vec![0u64; card as usize];
        for &v in vals {
            c[v as usize] += 1;
        }
        c.iter().map(|&x| x as f64 / vals.len() as f64).collect()
    }

    #[test]
    fn uniform_is_flat() {
        let v = generate(&spec(1_000_000, 4, Distribution::Uniform)).unwrap();
        for s in shares(&v, 4) {
            assert!((s - 0.25).abs() <= 0.01, "{s}");
        }
    }

    #[test]
    fn zipf_top_two_near_forty_percent() {
        let v = generate(&spec(200_000, 100, Distribution::Zipf(1.5))).unwrap();
        let mut s = shares(&v, 100);
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let top2 = s[0] + s[1];
        assert!((0.35..=0.45).contains(&top2), "{top2}");
    }

    #[test]
    fn same_seed_same_values() {
        let a = generate(&spec(1000, 10, Distribution::Zipf(1.2))).unwrap();
        let b = generate(&spec(1000, 10, Distribution::Zipf(1.2))).unwrap();
        assert_eq!(a, b);
        let mut other = spec(1000, 10, Distribution::Zipf(1.2));
        other.seed += 1;
        assert_ne!(a, generate(&other).unwrap());
    }

    #[test]
    fn parsing() {
        assert_eq!("zipf:1.5".parse::<Distribution>().unwrap(), Distribution::Zipf(1.5));
        assert!("zipf:-1".parse::<Distribution>().is_err());
        assert!("normal".parse::<Distribution>().is_err());
        assert_eq!("90,4,3,3".parse::<Mix>().unwrap(), Mix::default());
        assert!("90,10".parse::<Mix>().is_err());
        assert!("90,10,1,0".parse::<Mix>().is_err());
    }
}
