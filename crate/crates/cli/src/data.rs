//! CSV input and output.
//!
//! Training files have header `s1,s2,y,a_1,b_1,...,a_J,b_J` (Gaussian agents)
//! or `s1,s2,y,a_1,...,a_J` (binary agents). New-site files use the same
//! layout without the `y` column.

use std::io::Write;
use std::path::Path;

use bsps_core::agents::{AgentForecastSet, ForecastKind};
use bsps_core::spatial::SiteSet;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub struct SiteData {
    pub sites: SiteSet,
    /// Present for training files only.
    pub y: Option<Vec<f64>>,
    pub forecasts: AgentForecastSet,
}

impl SiteData {
    pub fn kind(&self) -> ForecastKind {
        self.forecasts.kind()
    }

    pub fn y(&self) -> &[f64] {
        self.y.as_deref().unwrap_or(&[])
    }
}

/// Column layout implied by a header.
fn parse_header(header: &[String], with_y: bool, origin: &str) -> CliResult<(ForecastKind, usize)> {
    let fixed: &[&str] = if with_y { &["s1", "s2", "y"] } else { &["s1", "s2"] };
    for (k, name) in fixed.iter().enumerate() {
        if header.get(k).map(String::as_str) != Some(*name) {
            return Err(CliError::Data(format!(
                "{origin}: header column {} must be '{name}', found '{}'",
                k + 1,
                header.get(k).map_or("<missing>", String::as_str)
            )));
        }
    }
    let rest = &header[fixed.len()..];
    let gaussian = rest.iter().any(|c| c.starts_with("b_"));
    let expected: Vec<String> = if gaussian {
        (1..=rest.len() / 2).flat_map(|j| [format!("a_{j}"), format!("b_{j}")]).collect()
    } else {
        (1..=rest.len()).map(|j| format!("a_{j}")).collect()
    };
    if rest != expected.as_slice() || (gaussian && rest.len() % 2 != 0) {
        let layout = if with_y {
            "s1,s2,y,a_1,b_1,...,a_J,b_J or s1,s2,y,a_1,...,a_J"
        } else {
            "s1,s2,a_1,b_1,...,a_J,b_J or s1,s2,a_1,...,a_J"
        };
        return Err(CliError::Data(format!(
            "{origin}: unexpected agent columns {rest:?}; expected {layout}"
        )));
    }
    let kind = if gaussian { ForecastKind::Gaussian } else { ForecastKind::Bernoulli };
    let n_agents = if gaussian { rest.len() / 2 } else { rest.len() };
    Ok((kind, n_agents))
}

/// Reads a site file. `with_y` selects the training layout; `kind_hint`
/// resolves the agent kind of files without agent columns.
pub fn read_sites(path: &Path, with_y: bool, kind_hint: Option<ForecastKind>) -> CliResult<SiteData> {
    let origin = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Data(format!("cannot open {origin}: {e}")))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Data(format!("{origin}: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let (mut kind, n_agents) = parse_header(&header, with_y, &origin)?;
    if n_agents == 0 {
        kind = kind_hint.unwrap_or(ForecastKind::Gaussian);
    }
    let offset = if with_y { 3 } else { 2 };
    let mut coords = Vec::new();
    let mut y = Vec::new();
    let mut means = vec![Vec::new(); n_agents];
    let mut vars = vec![Vec::new(); n_agents];
    for (r, record) in reader.records().enumerate() {
        let line = r + 2;
        let record = record.map_err(|e| CliError::Data(format!("{origin}: line {line}: {e}")))?;
        if record.len() != header.len() {
            return Err(CliError::Data(format!(
                "{origin}: line {line}: expected {} fields, found {}",
                header.len(),
                record.len()
            )));
        }
        let cell = |c: usize| -> CliResult<f64> {
            let v: f64 = record[c].parse().map_err(|_| {
                CliError::Data(format!(
                    "{origin}: line {line}, column '{}': cannot parse '{}' as a number",
                    header[c], &record[c]
                ))
            })?;
            if !v.is_finite() {
                return Err(CliError::Data(format!(
                    "{origin}: line {line}, column '{}': value must be finite",
                    header[c]
                )));
            }
            Ok(v)
        };
        let bad = |c: usize, why: String| CliError::Data(format!("{origin}: line {line}, column '{}': {why}", header[c]));
        coords.push([cell(0)?, cell(1)?]);
        if with_y {
            let v = cell(2)?;
            if kind == ForecastKind::Bernoulli && v != 0.0 && v != 1.0 {
                return Err(bad(2, format!("binary response must be 0 or 1, got {v}")));
            }
            y.push(v);
        }
        for j in 0..n_agents {
            match kind {
                ForecastKind::Gaussian => {
                    let (ca, cb) = (offset + 2 * j, offset + 2 * j + 1);
                    means[j].push(cell(ca)?);
                    let b = cell(cb)?;
                    if b <= 0.0 {
                        return Err(bad(cb, format!("variance must be positive, got {b}")));
                    }
                    vars[j].push(b);
                }
                ForecastKind::Bernoulli => {
                    let c = offset + j;
                    let a = cell(c)?;
                    if !(0.0..=1.0).contains(&a) {
                        return Err(bad(c, format!("probability must lie in [0, 1], got {a}")));
                    }
                    means[j].push(a);
                }
            }
        }
    }
    if coords.is_empty() {
        return Err(CliError::Data(format!("{origin}: no data rows")));
    }
    let n = coords.len();
    let sites = SiteSet::new(coords).map_err(|e| match e {
        bsps_core::Error::DuplicateSites { first, second, .. } => CliError::Data(format!(
            "{origin}: lines {} and {} have the same coordinates",
            first + 2,
            second + 2
        )),
        other => CliError::Data(format!("{origin}: {other}")),
    })?;
    let forecasts = match kind {
        ForecastKind::Gaussian if n_agents == 0 => AgentForecastSet::empty(kind, n),
        ForecastKind::Bernoulli if n_agents == 0 => AgentForecastSet::empty(kind, n),
        ForecastKind::Gaussian => AgentForecastSet::gaussian(means, vars)?,
        ForecastKind::Bernoulli => AgentForecastSet::bernoulli(means)?,
    };
    Ok(SiteData {
        sites,
        y: with_y.then_some(y),
        forecasts,
    })
}

/// Header for site files with `n_agents` agents of `kind`.
pub fn site_header(kind: ForecastKind, n_agents: usize, with_y: bool) -> Vec<String> {
    let mut h = vec!["s1".to_string(), "s2".to_string()];
    if with_y {
        h.push("y".into());
    }
    for j in 1..=n_agents {
        h.push(format!("a_{j}"));
        if kind == ForecastKind::Gaussian {
            h.push(format!("b_{j}"));
        }
    }
    h
}

/// Row matching [`site_header`] for site `i`.
pub fn site_row(sites: &SiteSet, y: Option<&[f64]>, forecasts: &AgentForecastSet, i: usize) -> Vec<f64> {
    let s = sites.get(i);
    let mut row = vec![s[0], s[1]];
    if let Some(y) = y {
        row.push(y[i]);
    }
    for j in 0..forecasts.n_agents() {
        row.push(forecasts.means(j)[i]);
        if forecasts.kind() == ForecastKind::Gaussian {
            row.push(forecasts.variances(j)[i]);
        }
    }
    row
}

/// Formats a value so that it parses back to the same `f64`; empty for NaN.
pub fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

pub fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<f64>>) -> CliResult<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let io = |e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(row.iter().map(|v| fmt_num(*v))).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes string records, for tables with text columns.
pub fn write_text_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let io = |e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(row).map_err(io)?;
    }
    w.into_inner()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        .flush()?;
    Ok(())
}
