//! Self-describing binary container for fitted models.
//!
//! Byte layout, all integers and floats little-endian:
//!
//! ```text
//! offset  size  content
//! 0       8     magic "BSPSPOST"
//! 8       4     u32 format version (currently 1)
//! 12      4     u32 header length H in bytes
//! 16      H     UTF-8 JSON header (see ArtifactHeader)
//! 16+H    8*R*C f64 values, draw-major: row r holds columns[0..C] of draw r
//! ```
//!
//! MCMC artifacts hold one row per retained draw with columns
//! `beta_{j}_{i}` (field `j`, training site `i`), `tau_{j}`, `g_{j}` and, for
//! Gaussian responses, `sigma2`. Variational artifacts hold a single row with
//! the variational parameters (`m_`, `s2_`, `mu_`, `sigma_{j}_{r}_{c}`,
//! `sigma_log_det_`, `a_tau_`, `b_tau_`, `p_{j}_{l}`, `a_sigma`, `b_sigma`).
//! Latent factor draws are not stored.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::agents::ForecastKind;
use crate::error::{Error, Result};
use crate::gibbs::{Backend, CoefficientFields, PosteriorDraw, PosteriorSamples, PriorConfig};
use crate::spatial::SiteSet;
use crate::vb::{RangeGrid, VariationalState};

pub const MAGIC: &[u8; 8] = b"BSPSPOST";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactKind {
    Mcmc,
    Vb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub kind: ArtifactKind,
    pub response: ForecastKind,
    pub n_sites: usize,
    pub n_agents: usize,
    pub n_rows: usize,
    pub backend: Backend,
    pub kernel: String,
    pub priors: PriorConfig,
    /// Echo of the configuration that produced the fit.
    pub config: serde_json::Value,
    pub coords: Vec<[f64; 2]>,
    /// Range grid of a variational fit.
    pub grid: Option<Vec<f64>>,
    pub acceptance: Vec<f64>,
    pub mh_steps: Vec<f64>,
    pub columns: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Artifact {
    pub header: ArtifactHeader,
    /// Row-major values, `n_rows * columns.len()`.
    pub data: Vec<f64>,
}

fn mcmc_columns(n: usize, p: usize, response: ForecastKind) -> Vec<String> {
    let mut cols = Vec::with_capacity(p * (n + 2) + 1);
    for j in 0..p {
        cols.extend((0..n).map(|i| format!("beta_{j}_{i}")));
    }
    cols.extend((0..p).map(|j| format!("tau_{j}")));
    cols.extend((0..p).map(|j| format!("g_{j}")));
    if response == ForecastKind::Gaussian {
        cols.push("sigma2".into());
    }
    cols
}

fn vb_columns(n: usize, n_agents: usize, n_grid: usize) -> Vec<String> {
    let p = n_agents + 1;
    let mut cols = Vec::new();
    for prefix in ["m", "s2"] {
        for j in 1..p {
            cols.extend((0..n).map(|i| format!("{prefix}_{j}_{i}")));
        }
    }
    for j in 0..p {
        cols.extend((0..n).map(|i| format!("mu_{j}_{i}")));
    }
    for j in 0..p {
        for r in 0..n {
            cols.extend((0..n).map(|c| format!("sigma_{j}_{r}_{c}")));
        }
    }
    for prefix in ["sigma_log_det", "a_tau", "b_tau"] {
        cols.extend((0..p).map(|j| format!("{prefix}_{j}")));
    }
    for j in 0..p {
        cols.extend((0..n_grid).map(|l| format!("p_{j}_{l}")));
    }
    cols.push("a_sigma".into());
    cols.push("b_sigma".into());
    cols
}

impl Artifact {
    pub fn from_samples(samples: &PosteriorSamples, priors: &PriorConfig, config: serde_json::Value) -> Self {
        let n = samples.sites.len();
        let p = samples.n_agents() + 1;
        let columns = mcmc_columns(n, p, samples.response);
        let mut data = Vec::with_capacity(columns.len() * samples.draws.len());
        for d in &samples.draws {
            for field in &d.coef.beta {
                data.extend_from_slice(field);
            }
            data.extend_from_slice(&d.coef.tau);
            data.extend_from_slice(&d.coef.g);
            if samples.response == ForecastKind::Gaussian {
                data.push(d.sigma2.unwrap_or(f64::NAN));
            }
        }
        Self {
            header: ArtifactHeader {
                kind: ArtifactKind::Mcmc,
                response: samples.response,
                n_sites: n,
                n_agents: p - 1,
                n_rows: samples.draws.len(),
                backend: samples.backend,
                kernel: "exponential".into(),
                priors: priors.clone(),
                config,
                coords: samples.sites.coords().to_vec(),
                grid: None,
                acceptance: samples.acceptance.clone(),
                mh_steps: samples.mh_steps.clone(),
                columns,
            },
            data,
        }
    }

    pub fn from_vb(
        state: &VariationalState,
        sites: &SiteSet,
        grid: &RangeGrid,
        priors: &PriorConfig,
        config: serde_json::Value,
    ) -> Self {
        let n = sites.len();
        let n_agents = state.n_agents();
        let columns = vb_columns(n, n_agents, grid.len());
        let mut data = Vec::with_capacity(columns.len());
        for v in state.m.iter().chain(&state.s2).chain(&state.mu) {
            data.extend_from_slice(v);
        }
        for s in &state.sigma {
            for r in 0..n {
                data.extend((0..n).map(|c| s[(r, c)]));
            }
        }
        data.extend_from_slice(&state.sigma_log_det);
        data.extend_from_slice(&state.a_tau);
        data.extend_from_slice(&state.b_tau);
        for p in &state.p {
            data.extend_from_slice(p);
        }
        data.push(state.a_sigma);
        data.push(state.b_sigma);
        Self {
            header: ArtifactHeader {
                kind: ArtifactKind::Vb,
                response: ForecastKind::Gaussian,
                n_sites: n,
                n_agents,
                n_rows: 1,
                backend: Backend::FullGp,
                kernel: "exponential".into(),
                priors: priors.clone(),
                config,
                coords: sites.coords().to_vec(),
                grid: Some(grid.points().to_vec()),
                acceptance: Vec::new(),
                mh_steps: Vec::new(),
                columns,
            },
            data,
        }
    }

    pub fn sites(&self) -> Result<SiteSet> {
        SiteSet::new(self.header.coords.clone())
    }

    fn row(&self, r: usize) -> &[f64] {
        let c = self.header.columns.len();
        &self.data[r * c..(r + 1) * c]
    }

    fn expect_kind(&self, kind: ArtifactKind) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::ArtifactMismatch(format!(
                "expected a {kind:?} artifact, found {:?}",
                self.header.kind
            )));
        }
        Ok(())
    }

    pub fn to_samples(&self) -> Result<PosteriorSamples> {
        self.expect_kind(ArtifactKind::Mcmc)?;
        let h = &self.header;
        let (n, p) = (h.n_sites, h.n_agents + 1);
        let gaussian = h.response == ForecastKind::Gaussian;
        let draws = (0..h.n_rows)
            .map(|r| {
                let row = self.row(r);
                let beta = (0..p).map(|j| row[j * n..(j + 1) * n].to_vec()).collect();
                let rest = &row[p * n..];
                PosteriorDraw {
                    f: Vec::new(),
                    coef: CoefficientFields {
                        beta,
                        tau: rest[..p].to_vec(),
                        g: rest[p..2 * p].to_vec(),
                    },
                    sigma2: gaussian.then(|| rest[2 * p]),
                }
            })
            .collect();
        Ok(PosteriorSamples {
            response: h.response,
            backend: h.backend,
            sites: self.sites()?,
            beta_bar: h.priors.beta_bar.clone(),
            draws,
            acceptance: h.acceptance.clone(),
            mh_steps: h.mh_steps.clone(),
        })
    }

    pub fn to_vb(&self) -> Result<(VariationalState, RangeGrid)> {
        self.expect_kind(ArtifactKind::Vb)?;
        let h = &self.header;
        let grid = RangeGrid::new(
            h.grid
                .clone()
                .ok_or_else(|| Error::InvalidArtifact("variational artifact without a range grid".into()))?,
        )?;
        let (n, j_count, l) = (h.n_sites, h.n_agents, grid.len());
        let p = j_count + 1;
        let mut rest = self.row(0);
        let mut take = |len: usize| {
            let (head, tail) = rest.split_at(len);
            rest = tail;
            head.to_vec()
        };
        let m = (0..j_count).map(|_| take(n)).collect();
        let s2 = (0..j_count).map(|_| take(n)).collect();
        let mu = (0..p).map(|_| take(n)).collect();
        let sigma = (0..p).map(|_| DMatrix::from_row_slice(n, n, &take(n * n))).collect();
        let sigma_log_det = take(p);
        let a_tau = take(p);
        let b_tau = take(p);
        let pw = (0..p).map(|_| take(l)).collect();
        let tail = take(2);
        let state = VariationalState {
            m,
            s2,
            mu,
            sigma,
            sigma_log_det,
            a_tau,
            b_tau,
            p: pw,
            a_sigma: tail[0],
            b_sigma: tail[1],
        };
        Ok((state, grid))
    }

    fn validate(&self) -> Result<()> {
        let h = &self.header;
        let expected = match h.kind {
            ArtifactKind::Mcmc => mcmc_columns(h.n_sites, h.n_agents + 1, h.response),
            ArtifactKind::Vb => vb_columns(h.n_sites, h.n_agents, h.grid.as_ref().map_or(0, Vec::len)),
        };
        if h.columns != expected {
            return Err(Error::InvalidArtifact("column list does not match the header dimensions".into()));
        }
        if h.coords.len() != h.n_sites {
            return Err(Error::InvalidArtifact(format!(
                "{} coordinates for {} sites",
                h.coords.len(),
                h.n_sites
            )));
        }
        if h.priors.beta_bar.len() != h.n_agents + 1 {
            return Err(Error::InvalidArtifact("prior means do not match the agent count".into()));
        }
        if h.kind == ArtifactKind::Vb && h.n_rows != 1 {
            return Err(Error::InvalidArtifact("variational artifacts hold exactly one row".into()));
        }
        if self.data.len() != h.n_rows * h.columns.len() {
            return Err(Error::InvalidArtifact(format!(
                "expected {} values, found {}",
                h.n_rows * h.columns.len(),
                self.data.len()
            )));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        self.validate()?;
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::InvalidArtifact(e.to_string()))?;
        let header_len = u32::try_from(header.len())
            .map_err(|_| Error::InvalidArtifact("header longer than 4 GiB".into()))?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&header_len.to_le_bytes())?;
        w.write_all(&header)?;
        let mut buf = Vec::with_capacity(8 * self.data.len());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::InvalidArtifact("file too short for the magic tag".into()))?;
        if &magic != MAGIC {
            return Err(Error::InvalidArtifact("missing BSPSPOST magic tag".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(Error::InvalidArtifact(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        r.read_exact(&mut word)?;
        let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
        r.read_exact(&mut header)
            .map_err(|_| Error::InvalidArtifact("truncated header".into()))?;
        let header: ArtifactHeader =
            serde_json::from_slice(&header).map_err(|e| Error::InvalidArtifact(format!("header: {e}")))?;
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() % 8 != 0 {
            return Err(Error::InvalidArtifact("body is not a whole number of f64 values".into()));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let artifact = Self { header, data };
        artifact.validate()?;
        Ok(artifact)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}
