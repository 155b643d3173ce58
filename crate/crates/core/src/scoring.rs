//! The matching model and the three scores built on it: the confounded
//! conditional score used in training, the deconfounded score and the
//! popularity-adjusted score used at inference.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::popularity::PopularityForecast;

/// Positive link: `e^x` for `x <= 0`, `x + 1` otherwise.
#[inline]
pub fn elu_prime(x: f64) -> f64 {
    if x <= 0.0 {
        x.exp()
    } else {
        x + 1.0
    }
}

/// Derivative of [`elu_prime`].
#[inline]
pub fn elu_prime_grad(x: f64) -> f64 {
    if x <= 0.0 {
        x.exp()
    } else {
        1.0
    }
}

/// `m^gamma` via `exp(gamma * ln m)`. Requires `m > 0`.
#[inline]
pub fn pop_power(m: f64, gamma: f64) -> f64 {
    (gamma * m.ln()).exp()
}

/// A user-item matching function `f(u, i)`.
pub trait Matcher: Sync {
    fn num_users(&self) -> usize;
    fn num_items(&self) -> usize;
    /// Unchecked match score.
    fn raw_match(&self, user: usize, item: usize) -> f64;

    fn match_score(&self, user: usize, item: usize) -> Result<f64> {
        check_index("user", user, self.num_users())?;
        check_index("item", item, self.num_items())?;
        Ok(self.raw_match(user, item))
    }
}

fn check_index(kind: &'static str, index: usize, size: usize) -> Result<()> {
    if index >= size {
        Err(Error::IndexOutOfRange { kind, index, size })
    } else {
        Ok(())
    }
}

/// Plain matrix factorization: row-major user and item embeddings, no biases.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    pub num_users: usize,
    pub num_items: usize,
    pub dim: usize,
    pub user_emb: Vec<f64>,
    pub item_emb: Vec<f64>,
    pub gamma: f64,
    pub gamma_tilde: f64,
    pub seed: u64,
}

impl FactorModel {
    pub fn zeros(num_users: usize, num_items: usize, dim: usize) -> Self {
        FactorModel {
            num_users,
            num_items,
            dim,
            user_emb: vec![0.0; num_users * dim],
            item_emb: vec![0.0; num_items * dim],
            gamma: 0.0,
            gamma_tilde: 0.0,
            seed: 0,
        }
    }

    /// Zero-mean Gaussian initialization with standard deviation `scale`.
    pub fn random(num_users: usize, num_items: usize, dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale).expect("init scale must be finite and non-negative");
        let mut m = FactorModel::zeros(num_users, num_items, dim);
        m.user_emb.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        m.item_emb.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        m.seed = seed;
        m
    }

    #[inline]
    pub fn user_row(&self, u: usize) -> &[f64] {
        &self.user_emb[u * self.dim..(u + 1) * self.dim]
    }

    #[inline]
    pub fn item_row(&self, i: usize) -> &[f64] {
        &self.item_emb[i * self.dim..(i + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("embedding dimension must be at least 1"));
        }
        if self.user_emb.len() != self.num_users * self.dim
            || self.item_emb.len() != self.num_items * self.dim
        {
            return Err(Error::config("embedding shapes do not match dimensions"));
        }
        if !(self.gamma >= 0.0 && self.gamma_tilde >= 0.0) {
            return Err(Error::config("popularity exponents must be non-negative"));
        }
        if !self
            .user_emb
            .iter()
            .chain(&self.item_emb)
            .all(|x| x.is_finite())
        {
            return Err(Error::config("embeddings contain non-finite values"));
        }
        Ok(())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Matcher for FactorModel {
    fn num_users(&self) -> usize {
        self.num_users
    }

    fn num_items(&self) -> usize {
        self.num_items
    }

    #[inline]
    fn raw_match(&self, user: usize, item: usize) -> f64 {
        dot(self.user_row(user), self.item_row(item))
    }
}

/// Unnormalized `P(c=1 | u, i, m)`: `elu'(f(u, i)) * m^gamma`.
pub fn conditional_score<M: Matcher + ?Sized>(
    model: &M,
    user: usize,
    item: usize,
    m: f64,
    gamma: f64,
) -> Result<f64> {
    if !(m > 0.0) {
        return Err(Error::NonPositivePopularity(m));
    }
    Ok(elu_prime(model.match_score(user, item)?) * pop_power(m, gamma))
}

/// Deconfounded score `elu'(f(u, i))`; the constant popularity expectation is
/// dropped since it cannot change a ranking.
pub fn pd_score<M: Matcher + ?Sized>(model: &M, user: usize, item: usize) -> Result<f64> {
    Ok(elu_prime(model.match_score(user, item)?))
}

/// Popularity-adjusted score `elu'(f(u, i)) * m_tilde_i^gamma_tilde`.
pub fn pda_score<M: Matcher + ?Sized>(
    model: &M,
    user: usize,
    item: usize,
    forecast: &PopularityForecast,
    gamma_tilde: f64,
) -> Result<f64> {
    let m = forecast.get(item)?;
    if !(m > 0.0) {
        return Err(Error::NonPositivePopularity(m));
    }
    Ok(elu_prime(model.match_score(user, item)?) * pop_power(m, gamma_tilde))
}

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"PDACKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

impl FactorModel {
    /// Writes the checkpoint layout (all little-endian):
    ///
    /// ```text
    /// magic        8 bytes  "PDACKPT\0"
    /// version      u32      1
    /// dim          u32
    /// num_users    u64
    /// num_items    u64
    /// gamma        f64
    /// gamma_tilde  f64
    /// seed         u64
    /// user_emb     num_users * dim f64, row-major
    /// item_emb     num_items * dim f64, row-major
    /// ```
    pub fn write_checkpoint<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = BufWriter::new(out);
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.num_users as u64).to_le_bytes())?;
        w.write_all(&(self.num_items as u64).to_le_bytes())?;
        w.write_all(&self.gamma.to_le_bytes())?;
        w.write_all(&self.gamma_tilde.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        for x in self.user_emb.iter().chain(&self.item_emb) {
            w.write_all(&x.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_checkpoint<R: Read>(input: R) -> Result<Self> {
        let mut r = BufReader::new(input);
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let num_users = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let num_items = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let gamma = f64::from_le_bytes(read_array(&mut r)?);
        let gamma_tilde = f64::from_le_bytes(read_array(&mut r)?);
        let seed = u64::from_le_bytes(read_array(&mut r)?);
        let mut read_block = |n: usize| -> Result<Vec<f64>> {
            (0..n)
                .map(|_| Ok(f64::from_le_bytes(read_array(&mut r)?)))
                .collect()
        };
        let user_emb = read_block(num_users * dim)?;
        let item_emb = read_block(num_items * dim)?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| Error::Checkpoint(e.to_string()))? != 0 {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        let model = FactorModel {
            num_users,
            num_items,
            dim,
            user_emb,
            item_emb,
            gamma,
            gamma_tilde,
            seed,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_checkpoint(f).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(f)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn model_2d(user: [f64; 2], item: [f64; 2]) -> FactorModel {
        let mut m = FactorModel::zeros(1, 1, 2);
        m.user_emb.copy_from_slice(&user);
        m.item_emb.copy_from_slice(&item);
        m
    }

    #[test]
    fn elu_prime_values() {
        assert_eq!(elu_prime(0.0), 1.0);
        assert_eq!(elu_prime(1.0), 2.0);
        assert!((elu_prime(-1.0) - 0.367_879_441_171_442_3).abs() < 1e-15);
    }

    #[test]
    fn match_score_examples() {
        assert_eq!(FactorModel::zeros(2, 2, 3).match_score(1, 1).unwrap(), 0.0);
        assert_eq!(model_2d([1.0, 0.0], [0.0, 1.0]).match_score(0, 0).unwrap(), 0.0);
        assert_eq!(model_2d([1.0, 2.0], [3.0, -1.0]).match_score(0, 0).unwrap(), 1.0);
        assert!(matches!(
            model_2d([1.0, 2.0], [3.0, -1.0]).match_score(0, 1),
            Err(Error::IndexOutOfRange { kind: "item", .. })
        ));
    }

    #[test]
    fn conditional_score_examples() {
        let zero = FactorModel::zeros(1, 1, 2);
        assert!((conditional_score(&zero, 0, 0, 0.25, 0.5).unwrap() - 0.5).abs() < 1e-15);
        let one = model_2d([1.0, 2.0], [3.0, -1.0]);
        for m in [0.01, 0.3, 0.9] {
            assert_eq!(conditional_score(&one, 0, 0, m, 0.0).unwrap(), 2.0);
        }
        // 2 * 0.01^0.1 = 2 * 10^-0.2
        let expected = 2.0 * 10f64.powf(-0.2);
        assert!((conditional_score(&one, 0, 0, 0.01, 0.1).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 1.261_914).abs() < 1e-6);
        assert!(matches!(
            conditional_score(&one, 0, 0, 0.0, 0.1),
            Err(Error::NonPositivePopularity(_))
        ));
    }

    #[test]
    fn pd_and_pda_examples() {
        let zero = FactorModel::zeros(1, 1, 2);
        assert_eq!(pd_score(&zero, 0, 0).unwrap(), 1.0);
        let f = PopularityForecast {
            m_tilde: vec![0.04],
            ..PopularityForecast::uniform(1)
        };
        assert!((pda_score(&zero, 0, 0, &f, 0.5).unwrap() - 0.2).abs() < 1e-15);
        assert!(matches!(
            pda_score(&zero, 0, 1, &f, 0.5),
            Err(Error::MissingForecast(1)) | Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut m = FactorModel::random(7, 5, 3, 0.1, 11);
        m.gamma = 0.12;
        m.gamma_tilde = 0.3;
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 4 + 8 + 8 + 8 + 8 + 8 + 8 * (7 + 5) * 3);
        let back = FactorModel::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        let mut again = Vec::new();
        back.write_checkpoint(&mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let m = FactorModel::random(2, 2, 2, 0.1, 1);
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        assert!(FactorModel::read_checkpoint(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(FactorModel::read_checkpoint(extra.as_slice()).is_err());
        buf[0] = b'X';
        assert!(FactorModel::read_checkpoint(buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn conditional_score_monotone(f in -5.0f64..5.0, df in 1e-3f64..2.0, m in 1e-4f64..0.9, gamma in 0.01f64..1.0) {
            let lo = elu_prime(f) * pop_power(m, gamma);
            let hi = elu_prime(f + df) * pop_power(m, gamma);
            prop_assert!(hi > lo);
            let more = elu_prime(f) * pop_power((m * 1.1).min(1.0), gamma);
            prop_assert!(more > lo);
        }

        #[test]
        fn pda_at_last_stage_reproduces_conditional(u in prop::collection::vec(-1.0f64..1.0, 4), i in prop::collection::vec(-1.0f64..1.0, 4), m in 1e-4f64..1.0, gamma in 0.0f64..0.5) {
            let mut model = FactorModel::zeros(1, 1, 4);
            model.user_emb.copy_from_slice(&u);
            model.item_emb.copy_from_slice(&i);
            let f = PopularityForecast { m_tilde: vec![m], ..PopularityForecast::uniform(1) };
            prop_assert_eq!(
                pda_score(&model, 0, 0, &f, gamma).unwrap(),
                conditional_score(&model, 0, 0, m, gamma).unwrap()
            );
        }
    }
}
