//! Synthetic datasets: low-rank valuations `v_ij = mu_i + eps_ij` with
//! `mu_i ~ U[1, 2]` and `eps_ij ~ U[0, 0.01]`, labeled by maximum
//! utilitarian welfare.
//!
//! A profile consumes its stream as all `mu` draws first, then the `eps`
//! draws in row-major order. A row that comes out with two equal entries has
//! its `eps` draws redrawn; the number of redraws is kept in the metadata.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fairdiv::{muw_allocation, IntegralAllocation, ValuationProfile};
use crate::matrix::Matrix;
use crate::rng::{RngStream, RNG_NAME};

pub const GENERATOR_NAME: &str = "uniform-lowrank";

const MU_RANGE: (f64, f64) = (1.0, 2.0);
const EPS_RANGE: (f64, f64) = (0.0, 0.01);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Labeler {
    Muw,
}

impl Labeler {
    pub fn label(self, profile: &ValuationProfile) -> IntegralAllocation {
        match self {
            Labeler::Muw => muw_allocation(profile),
        }
    }
}

impl FromStr for Labeler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "muw" => Ok(Labeler::Muw),
            other => Err(Error::invalid(format!("unknown labeler {other:?}"))),
        }
    }
}

impl fmt::Display for Labeler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Labeler::Muw => f.write_str("muw"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n: usize,
    pub m: usize,
    pub count: usize,
    pub seed: u64,
    pub generator: String,
    pub labeler: String,
    pub resample_count: u64,
    pub rng: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub profile: ValuationProfile,
    pub allocation: IntegralAllocation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<Sample>,
}

fn has_row_tie(row: &[f64]) -> bool {
    let mut sorted = row.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.windows(2).any(|w| w[0] == w[1])
}

/// Draws one profile; returns it with the number of row redraws needed.
pub fn sample_profile_counted(n: usize, m: usize, rng: &mut RngStream) -> Result<(ValuationProfile, u64)> {
    if n == 0 || m == 0 {
        return Err(Error::invalid("need at least one agent and one good"));
    }
    let mu: Vec<f64> = (0..n).map(|_| rng.uniform(MU_RANGE.0, MU_RANGE.1)).collect();
    let mut values = Matrix::zeros(n, m);
    for (i, &mu_i) in mu.iter().enumerate() {
        for j in 0..m {
            values.set(i, j, mu_i + rng.uniform(EPS_RANGE.0, EPS_RANGE.1));
        }
    }
    let mut resamples = 0;
    for (i, &mu_i) in mu.iter().enumerate() {
        while has_row_tie(values.row(i)) {
            resamples += 1;
            for j in 0..m {
                values.set(i, j, mu_i + rng.uniform(EPS_RANGE.0, EPS_RANGE.1));
            }
        }
    }
    Ok((ValuationProfile::new(values)?, resamples))
}

pub fn sample_profile(n: usize, m: usize, rng: &mut RngStream) -> Result<ValuationProfile> {
    Ok(sample_profile_counted(n, m, rng)?.0)
}

pub fn generate_dataset(n: usize, m: usize, count: usize, seed: u64, labeler: Labeler) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::invalid("a dataset needs at least one sample"));
    }
    let mut rng = RngStream::new(seed);
    let mut resample_count = 0;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let (profile, redraws) = sample_profile_counted(n, m, &mut rng)?;
        resample_count += redraws;
        let allocation = labeler.label(&profile);
        samples.push(Sample { profile, allocation });
    }
    Ok(Dataset {
        meta: DatasetMeta {
            n,
            m,
            count,
            seed,
            generator: GENERATOR_NAME.into(),
            labeler: labeler.to_string(),
            resample_count,
            rng: RNG_NAME.into(),
        },
        samples,
    })
}

#[derive(Serialize, Deserialize)]
struct DatasetDoc {
    meta: DatasetMeta,
    samples: Vec<SampleDoc>,
}

#[derive(Serialize, Deserialize)]
struct SampleDoc {
    valuations: Vec<Vec<f64>>,
    allocation: Vec<Vec<u8>>,
}

impl Dataset {
    pub fn agents(&self) -> usize {
        self.meta.n
    }

    pub fn goods(&self) -> usize {
        self.meta.m
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn profiles(&self) -> impl Iterator<Item = &ValuationProfile> {
        self.samples.iter().map(|s| &s.profile)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = DatasetDoc {
            meta: self.meta.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| SampleDoc {
                    valuations: s.profile.matrix().to_rows(),
                    allocation: s
                        .allocation
                        .to_matrix()
                        .to_rows()
                        .into_iter()
                        .map(|r| r.into_iter().map(|x| x as u8).collect())
                        .collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&doc)? + "\n")
    }

    /// Parses and re-validates a dataset document.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: DatasetDoc = serde_json::from_str(text)?;
        let meta = doc.meta;
        if doc.samples.is_empty() {
            return Err(Error::invalid("dataset has no samples"));
        }
        if meta.count != doc.samples.len() {
            return Err(Error::invalid(format!(
                "meta.count is {} but {} samples are present",
                meta.count,
                doc.samples.len()
            )));
        }
        let labeler = meta.labeler.parse::<Labeler>()?;
        let lowrank = meta.generator == GENERATOR_NAME;
        let mut samples = Vec::with_capacity(doc.samples.len());
        for (k, s) in doc.samples.into_iter().enumerate() {
            let bad = |reason: String| Error::InvalidSample { sample: k, reason };
            let profile = ValuationProfile::from_rows(&s.valuations).map_err(|e| bad(e.to_string()))?;
            if profile.agents() != meta.n || profile.goods() != meta.m {
                return Err(bad(format!(
                    "profile is {}x{}, meta says {}x{}",
                    profile.agents(),
                    profile.goods(),
                    meta.n,
                    meta.m
                )));
            }
            if lowrank {
                if let Some(x) = profile.matrix().as_slice().iter().find(|&&x| !(1.0..=2.01).contains(&x)) {
                    return Err(bad(format!("valuation {x} outside [1, 2.01]")));
                }
            }
            let rows: Vec<Vec<f64>> = s
                .allocation
                .iter()
                .map(|r| r.iter().map(|&x| x as f64).collect())
                .collect();
            let matrix = Matrix::from_rows(&rows).map_err(|e| bad(e.to_string()))?;
            if matrix.shape() != (meta.n, meta.m) {
                return Err(bad(format!("allocation has shape {:?}", matrix.shape())));
            }
            let allocation = IntegralAllocation::from_matrix(&matrix).map_err(|e| bad(e.to_string()))?;
            if allocation != labeler.label(&profile) {
                return Err(bad(format!("allocation is not the {labeler} label")));
            }
            samples.push(Sample { profile, allocation });
        }
        Ok(Self { meta, samples })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the serialized document, hex encoded.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    ds.save(path)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::load(path)
}
