//! Halton draws for simulated likelihoods.
//!
//! Layout: dimension `k` uses the `k`-th prime as its base. Each dimension
//! is one Halton stream of length `n_individuals * nrep`, taken after
//! dropping the first `burn` elements. Individual `n` (position in the
//! sorted dataset) receives elements `[n * nrep, (n + 1) * nrep)` of every
//! stream, mapped through the inverse standard-normal CDF. No scrambling.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DrawError {
    #[error("Halton base {0} is not a prime")]
    NonPrimeBase(u64),
    #[error("probability {0} outside the open interval (0, 1)")]
    Domain(f64),
    #[error("{0} must be at least 1")]
    NonPositive(&'static str),
    #[error("draw values have shape {found}, expected {expected}")]
    Shape { expected: usize, found: usize },
}

pub type Result<T> = std::result::Result<T, DrawError>;

fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    let mut d = 2;
    while d * d <= n {
        if n % d == 0 {
            return false;
        }
        d += 1;
    }
    true
}

/// First `count` primes: 2, 3, 5, 7, ...
pub fn first_primes(count: usize) -> Vec<u64> {
    (2u64..).filter(|&n| is_prime(n)).take(count).collect()
}

/// Radical inverse of `index` in `base`, as a correctly rounded ratio of
/// two integers.
fn radical_inverse(base: u64, mut index: u64) -> f64 {
    let mut numerator: u128 = 0;
    let mut denominator: u128 = 1;
    while index > 0 {
        numerator = numerator * base as u128 + (index % base) as u128;
        denominator *= base as u128;
        index /= base;
    }
    numerator as f64 / denominator as f64
}

/// Elements `burn + 1 ..= burn + count` of the Halton sequence in `base`
/// (element `k` is the radical inverse of `k`). Every value lies strictly
/// inside (0, 1).
pub fn halton_sequence(base: u64, count: usize, burn: usize) -> Result<Vec<f64>> {
    if !is_prime(base) {
        return Err(DrawError::NonPrimeBase(base));
    }
    let start = burn as u64 + 1;
    Ok((start..start + count as u64)
        .map(|k| radical_inverse(base, k))
        .collect())
}

// Wichura's AS241 (PPND16) rational approximations, relative accuracy ~1e-16.
const A: [f64; 8] = [
    3.387_132_872_796_366_608_0,
    1.331_416_678_917_843_774_5e2,
    1.971_590_950_306_551_442_7e3,
    1.373_169_376_550_946_112_5e4,
    4.592_195_393_154_987_145_7e4,
    6.726_577_092_700_870_085_3e4,
    3.343_057_558_358_812_810_5e4,
    2.509_080_928_730_122_672_7e3,
];
const B: [f64; 8] = [
    1.0,
    4.231_333_070_160_091_125_2e1,
    6.871_870_074_920_579_083_0e2,
    5.394_196_021_424_751_107_7e3,
    2.121_379_430_158_659_586_7e4,
    3.930_789_580_009_271_061_0e4,
    2.872_908_573_572_194_267_4e4,
    5.226_495_278_852_854_561_0e3,
];
const C: [f64; 8] = [
    1.423_437_110_749_683_577_34,
    4.630_337_846_156_545_295_90,
    5.769_497_221_460_691_405_50,
    3.647_848_324_763_204_605_04,
    1.270_458_252_452_368_382_58,
    2.417_807_251_774_506_117_70e-1,
    2.272_384_498_926_918_458_33e-2,
    7.745_450_142_783_414_076_40e-4,
];
const D: [f64; 8] = [
    1.0,
    2.053_191_626_637_758_821_87,
    1.676_384_830_183_803_849_40,
    6.897_673_349_851_000_045_50e-1,
    1.481_039_764_274_800_745_90e-1,
    1.519_866_656_361_645_719_66e-2,
    5.475_938_084_995_344_946_00e-4,
    1.050_750_071_644_416_843_24e-9,
];
const E: [f64; 8] = [
    6.657_904_643_501_103_777_20,
    5.463_784_911_164_114_369_90,
    1.784_826_539_917_291_335_80,
    2.965_605_718_285_048_912_30e-1,
    2.653_218_952_657_612_309_30e-2,
    1.242_660_947_388_078_438_60e-3,
    2.711_555_568_743_487_578_15e-5,
    2.010_334_399_292_288_132_65e-7,
];
const F: [f64; 8] = [
    1.0,
    5.998_322_065_558_879_376_90e-1,
    1.369_298_809_227_358_053_10e-1,
    1.487_536_129_085_061_485_25e-2,
    7.868_691_311_456_132_591_00e-4,
    1.846_318_317_510_054_681_80e-5,
    1.421_511_758_316_445_888_70e-7,
    2.044_263_103_389_939_785_64e-15,
];

fn poly(coef: &[f64; 8], x: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

/// Inverse of the standard normal CDF.
pub fn inverse_normal_cdf(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(DrawError::Domain(u));
    }
    let q = u - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return Ok(q * poly(&A, r) / poly(&B, r));
    }
    let tail = if q < 0.0 { u } else { 1.0 - u };
    let r = (-tail.ln()).sqrt();
    let value = if r <= 5.0 {
        let r = r - 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        let r = r - 5.0;
        poly(&E, r) / poly(&F, r)
    };
    Ok(if q < 0.0 { -value } else { value })
}

/// Standard-normal draws for every individual, `dims x nrep` each.
#[derive(Clone, Debug, PartialEq)]
pub struct DrawSet {
    nrep: usize,
    burn: usize,
    dims: usize,
    n_individuals: usize,
    // [individual][dim][rep], row-major
    normals: Vec<f64>,
    uniforms: Vec<f64>,
}

impl DrawSet {
    /// Builds Halton-based draws; see the module docs for the layout.
    pub fn halton(n_individuals: usize, dims: usize, nrep: usize, burn: usize) -> Result<Self> {
        build_drawset(n_individuals, dims, nrep, burn)
    }

    /// Wraps explicit standard-normal values laid out as
    /// `[individual][dim][rep]`. The uniforms are recovered as `Φ(z)`.
    pub fn from_normals(
        n_individuals: usize,
        dims: usize,
        nrep: usize,
        normals: Vec<f64>,
    ) -> Result<Self> {
        if nrep == 0 {
            return Err(DrawError::NonPositive("nrep"));
        }
        let expected = n_individuals * dims * nrep;
        if normals.len() != expected {
            return Err(DrawError::Shape {
                expected,
                found: normals.len(),
            });
        }
        let uniforms = normals.iter().map(|&z| crate::stats::normal_cdf(z)).collect();
        Ok(Self {
            nrep,
            burn: 0,
            dims,
            n_individuals,
            normals,
            uniforms,
        })
    }

    /// A single draw per individual with no random dimensions; the
    /// simulated likelihood then reduces to the closed-form one.
    pub fn degenerate(n_individuals: usize) -> Self {
        Self {
            nrep: 1,
            burn: 0,
            dims: 0,
            n_individuals,
            normals: Vec::new(),
            uniforms: Vec::new(),
        }
    }

    pub fn nrep(&self) -> usize {
        self.nrep
    }

    pub fn burn(&self) -> usize {
        self.burn
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn n_individuals(&self) -> usize {
        self.n_individuals
    }

    /// Draws of individual `n`: `dims` consecutive slices of length `nrep`.
    pub fn individual(&self, n: usize) -> &[f64] {
        let width = self.dims * self.nrep;
        &self.normals[n * width..(n + 1) * width]
    }

    /// The `dims`-vector used for individual `n` in replication `r`.
    pub fn draw(&self, n: usize, r: usize) -> Vec<f64> {
        let block = self.individual(n);
        (0..self.dims).map(|k| block[k * self.nrep + r]).collect()
    }

    pub fn normal(&self, n: usize, dim: usize, rep: usize) -> f64 {
        self.normals[(n * self.dims + dim) * self.nrep + rep]
    }

    pub fn uniform(&self, n: usize, dim: usize, rep: usize) -> f64 {
        self.uniforms[(n * self.dims + dim) * self.nrep + rep]
    }

    /// CSV dump with columns `individual,dim,rep,uniform,normal`. When `ids`
    /// is given it labels individuals, otherwise their position is used.
    pub fn write_csv<W: Write>(&self, writer: W, ids: Option<&[i64]>) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["individual", "dim", "rep", "uniform", "normal"])?;
        for n in 0..self.n_individuals {
            let label = ids.map_or(n as i64, |ids| ids[n]);
            for k in 0..self.dims {
                for r in 0..self.nrep {
                    wtr.write_record(&[
                        label.to_string(),
                        (k + 1).to_string(),
                        (r + 1).to_string(),
                        self.uniform(n, k, r).to_string(),
                        self.normal(n, k, r).to_string(),
                    ])?;
                }
            }
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>, ids: Option<&[i64]>) -> csv::Result<()> {
        self.write_csv(std::fs::File::create(path)?, ids)
    }
}

/// Generates the Halton draw set for `n_individuals` individuals.
pub fn build_drawset(n_individuals: usize, dims: usize, nrep: usize, burn: usize) -> Result<DrawSet> {
    if nrep == 0 {
        return Err(DrawError::NonPositive("nrep"));
    }
    let width = dims * nrep;
    let mut normals = vec![0.0; n_individuals * width];
    let mut uniforms = vec![0.0; n_individuals * width];
    for (k, base) in first_primes(dims).into_iter().enumerate() {
        let stream = halton_sequence(base, n_individuals * nrep, burn)?;
        for (pos, &u) in stream.iter().enumerate() {
            let (n, r) = (pos / nrep, pos % nrep);
            let idx = n * width + k * nrep + r;
            uniforms[idx] = u;
            normals[idx] = inverse_normal_cdf(u)?;
        }
    }
    Ok(DrawSet {
        nrep,
        burn,
        dims,
        n_individuals,
        normals,
        uniforms,
    })
}
