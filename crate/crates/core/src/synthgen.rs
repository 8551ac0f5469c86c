//! Synthetic source/target domains from a linear structural causal model.
//!
//! ```text
//! z ~ N(0, I)                       confounders (unobserved)
//! c = M_c z + noise                 causal features
//! s = M_s(domain) z + noise         spurious features
//! y = 1[beta_c . c + beta_z . z + noise > 0]
//! ```
//!
//! Only the `z -> s` mechanism changes between domains, so `P(y | c, z)` is
//! shared while the association between `s` and `y` can reverse.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    fn stream(self) -> u64 {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Format(format!("unknown domain `{other}`"))),
        }
    }
}

/// Row-major `rows x cols` coefficient matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Config(format!(
                "matrix of {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    fn apply(&self, v: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            out.push(row.iter().zip(v).map(|(a, b)| a * b).sum());
        }
    }
}

/// Coefficients of the structural causal model. Matrices map confounders to
/// features, so `confounder_to_causal` is `n_causal x n_confounders`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmConfig {
    pub n_confounders: usize,
    pub n_causal: usize,
    pub n_spurious: usize,
    pub confounder_to_causal: Matrix,
    pub confounder_to_spurious_source: Matrix,
    pub confounder_to_spurious_target: Matrix,
    pub confounder_to_outcome: Vec<f64>,
    pub causal_to_outcome: Vec<f64>,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ScmConfig {
    /// The "flip" task: the target's spurious mechanism is the negation of
    /// the source's.
    fn default() -> Self {
        let spurious = Matrix::from_rows(&[&[1.0, 0.5], &[0.5, 1.0], &[1.0, -0.5]]).scaled(4.0);
        Self {
            n_confounders: 2,
            n_causal: 3,
            n_spurious: 3,
            confounder_to_causal: Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.5, 0.5]]).scaled(2.0),
            confounder_to_spurious_target: spurious.scaled(-1.0),
            confounder_to_spurious_source: spurious,
            confounder_to_outcome: vec![0.5, 0.5],
            causal_to_outcome: vec![1.0, 1.0, 1.0],
            noise_std: 0.5,
            seed: 0,
        }
    }
}

impl ScmConfig {
    pub fn validate(&self) -> Result<()> {
        let (z, c, s) = (self.n_confounders, self.n_causal, self.n_spurious);
        if z == 0 || c == 0 || s == 0 {
            return Err(Error::Config("scm dimensions must be positive".into()));
        }
        let check = |name: &str, m: &Matrix, rows: usize| {
            if m.rows != rows || m.cols != z || m.data.len() != rows * z {
                return Err(Error::Config(format!(
                    "scm.{name} must be {rows}x{z}, got {}x{}",
                    m.rows, m.cols
                )));
            }
            if m.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("scm.{name} has a non-finite entry")));
            }
            Ok(())
        };
        check("confounder_to_causal", &self.confounder_to_causal, c)?;
        check("confounder_to_spurious_source", &self.confounder_to_spurious_source, s)?;
        check("confounder_to_spurious_target", &self.confounder_to_spurious_target, s)?;
        if self.confounder_to_outcome.len() != z {
            return Err(Error::Config(format!(
                "scm.confounder_to_outcome needs {z} entries, got {}",
                self.confounder_to_outcome.len()
            )));
        }
        if self.causal_to_outcome.len() != c {
            return Err(Error::Config(format!(
                "scm.causal_to_outcome needs {c} entries, got {}",
                self.causal_to_outcome.len()
            )));
        }
        if !(self.noise_std > 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Config(format!("scm.noise_std must be positive, got {}", self.noise_std)));
        }
        Ok(())
    }

    /// 1 on causal columns, 0 on spurious ones (causal columns come first).
    pub fn causal_mask(&self) -> Vec<u8> {
        let mut mask = vec![1; self.n_causal];
        mask.resize(self.n_causal + self.n_spurious, 0);
        mask
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n x p` features.
    pub x: Tensor,
    pub y: Vec<usize>,
    pub domain: Domain,
    pub causal_mask: Option<Vec<u8>>,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, domain: Domain, causal_mask: Option<Vec<u8>>) -> Result<Self> {
        if x.shape().len() != 2 {
            return Err(Error::Data(format!("feature matrix must be 2-d, got {:?}", x.shape())));
        }
        if x.rows() != y.len() {
            return Err(Error::Data(format!("{} feature rows but {} labels", x.rows(), y.len())));
        }
        if let Some(mask) = &causal_mask {
            if mask.len() != x.cols() || mask.iter().any(|&m| m > 1) {
                return Err(Error::Data(format!(
                    "causal mask must hold {} entries of 0 or 1",
                    x.cols()
                )));
            }
        }
        Ok(Self {
            x,
            y,
            domain,
            causal_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn width(&self) -> usize {
        self.x.cols()
    }

    /// Rows `idx` as a new feature matrix and label vector.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let p = self.width();
        let mut data = Vec::with_capacity(idx.len() * p);
        for &i in idx {
            data.extend_from_slice(&self.x.data()[i * p..(i + 1) * p]);
        }
        let x = Tensor::matrix(idx.len(), p, data).expect("gathered rows");
        (x, idx.iter().map(|&i| self.y[i]).collect())
    }

    /// Column `j` of the features.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.x.at(i, j)).collect()
    }
}

/// Draws `n` samples of `domain`. The seed selects the sample; source and
/// target use separate streams of the same seed.
pub fn generate(cfg: &ScmConfig, domain: Domain, n: usize, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(domain.stream());
    let spurious = match domain {
        Domain::Source => &cfg.confounder_to_spurious_source,
        Domain::Target => &cfg.confounder_to_spurious_target,
    };
    let (zd, cd, sd) = (cfg.n_confounders, cfg.n_causal, cfg.n_spurious);
    let p = cd + sd;
    let mut x = Vec::with_capacity(n * p);
    let mut y = Vec::with_capacity(n);
    let mut z = vec![0.0; zd];
    let mut c = Vec::with_capacity(cd);
    let mut s = Vec::with_capacity(sd);
    let draw = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    for _ in 0..n {
        for v in z.iter_mut() {
            *v = draw(&mut rng);
        }
        cfg.confounder_to_causal.apply(&z, &mut c);
        for v in c.iter_mut() {
            *v += cfg.noise_std * draw(&mut rng);
        }
        spurious.apply(&z, &mut s);
        for v in s.iter_mut() {
            *v += cfg.noise_std * draw(&mut rng);
        }
        let score: f64 = cfg.causal_to_outcome.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>()
            + cfg.confounder_to_outcome.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>()
            + cfg.noise_std * draw(&mut rng);
        y.push(usize::from(score > 0.0));
        x.extend_from_slice(&c);
        x.extend_from_slice(&s);
    }
    Dataset::new(Tensor::matrix(n, p, x)?, y, domain, Some(cfg.causal_mask()))
}

const MASK_PREFIX: &str = "# causal_mask=";
const DOMAIN_PREFIX: &str = "# domain=";

/// Serializes `ds` as CSV: a mask comment line (when a mask is present), a
/// domain comment line, the `x0,...,label` header, then one row per sample
/// with 17 significant digits.
pub fn to_csv(ds: &Dataset) -> String {
    let p = ds.width();
    let mut out = String::new();
    if let Some(mask) = &ds.causal_mask {
        let mask: Vec<String> = mask.iter().map(|m| m.to_string()).collect();
        let _ = writeln!(out, "{MASK_PREFIX}{}", mask.join(","));
    }
    let _ = writeln!(out, "{DOMAIN_PREFIX}{}", ds.domain);
    for j in 0..p {
        let _ = write!(out, "x{j},");
    }
    out.push_str("label\n");
    for (i, label) in ds.y.iter().enumerate() {
        for v in &ds.x.data()[i * p..(i + 1) * p] {
            let _ = write!(out, "{v:.16e},");
        }
        let _ = writeln!(out, "{label}");
    }
    out
}

pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_csv(ds))?;
    Ok(())
}

/// Parses the CSV layout written by [`to_csv`]. When `require_mask` is set
/// a missing mask line is a format error; otherwise the mask is `None`.
/// A missing domain line defaults to the source domain.
pub fn parse_csv(text: &str, require_mask: bool) -> Result<Dataset> {
    let mut mask: Option<Vec<u8>> = None;
    let mut domain = Domain::Source;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));

    let header = loop {
        let Some((no, line)) = lines.next() else {
            return Err(Error::Format("missing header line".into()));
        };
        if let Some(rest) = line.strip_prefix(MASK_PREFIX) {
            let parsed = rest
                .split(',')
                .map(|t| match t.trim() {
                    "0" => Ok(0),
                    "1" => Ok(1),
                    other => Err(Error::Parse {
                        line: no,
                        message: format!("mask entry `{other}` is not 0 or 1"),
                    }),
                })
                .collect::<Result<Vec<u8>>>()?;
            mask = Some(parsed);
        } else if let Some(rest) = line.strip_prefix(DOMAIN_PREFIX) {
            domain = rest.trim().parse().map_err(|_| Error::Parse {
                line: no,
                message: format!("unknown domain `{}`", rest.trim()),
            })?;
        } else if line.starts_with('#') || line.trim().is_empty() {
            continue;
        } else {
            break (no, line);
        }
    };
    if require_mask && mask.is_none() {
        return Err(Error::Format("missing `# causal_mask=` line".into()));
    }

    let (hno, hline) = header;
    let columns: Vec<&str> = hline.split(',').map(str::trim).collect();
    if columns.last() != Some(&"label") {
        return Err(Error::Parse {
            line: hno,
            message: "header must end with a `label` column".into(),
        });
    }
    let p = columns.len() - 1;
    if p == 0 {
        return Err(Error::Parse {
            line: hno,
            message: "header has no feature columns".into(),
        });
    }
    for (j, name) in columns[..p].iter().enumerate() {
        if *name != format!("x{j}") {
            return Err(Error::Parse {
                line: hno,
                message: format!("expected column `x{j}`, found `{name}`"),
            });
        }
    }
    if let Some(m) = &mask {
        if m.len() != p {
            return Err(Error::Format(format!("mask has {} entries but there are {p} features", m.len())));
        }
    }

    let mut x = Vec::new();
    let mut y = Vec::new();
    for (no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != p + 1 {
            return Err(Error::Parse {
                line: no,
                message: format!("expected {} fields, found {}", p + 1, fields.len()),
            });
        }
        for (j, f) in fields[..p].iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line: no,
                message: format!("feature x{j} `{f}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: no,
                    message: format!("feature x{j} is not finite"),
                });
            }
            x.push(v);
        }
        let label: usize = fields[p].parse().map_err(|_| Error::Parse {
            line: no,
            message: format!("label `{}` is not a non-negative integer", fields[p]),
        })?;
        y.push(label);
    }
    if y.is_empty() {
        return Err(Error::Data("dataset has no rows".into()));
    }
    let n = y.len();
    Dataset::new(Tensor::matrix(n, p, x)?, y, domain, mask)
}

/// Reads a dataset that must carry a causal mask.
pub fn read_csv(path: &Path) -> Result<Dataset> {
    parse_csv(&std::fs::read_to_string(path)?, true)
}

/// Reads a dataset whose causal mask is optional.
pub fn read_csv_unmasked(path: &Path) -> Result<Dataset> {
    parse_csv(&std::fs::read_to_string(path)?, false)
}

/// Sample Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels_f64(ds: &Dataset) -> Vec<f64> {
        ds.y.iter().map(|&v| v as f64).collect()
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = ScmConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.causal_mask(), vec![1, 1, 1, 0, 0, 0]);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = ScmConfig::default();
        let a = generate(&cfg, Domain::Source, 50, 9).unwrap();
        let b = generate(&cfg, Domain::Source, 50, 9).unwrap();
        assert_eq!(a, b);
        let t = generate(&cfg, Domain::Target, 50, 9).unwrap();
        assert_ne!(a.x, t.x);
    }

    #[test]
    fn severed_spurious_edge_decorrelates() {
        let cfg = ScmConfig {
            confounder_to_spurious_source: Matrix::zeros(3, 2),
            confounder_to_spurious_target: Matrix::zeros(3, 2),
            ..ScmConfig::default()
        };
        for domain in [Domain::Source, Domain::Target] {
            let ds = generate(&cfg, domain, 2000, 1).unwrap();
            let y = labels_f64(&ds);
            for j in 3..6 {
                assert!(pearson(&ds.column(j), &y).abs() < 0.1);
            }
        }
    }

    #[test]
    fn flip_reverses_spurious_correlation() {
        let cfg = ScmConfig::default();
        let s = generate(&cfg, Domain::Source, 2000, 2).unwrap();
        let t = generate(&cfg, Domain::Target, 2000, 2).unwrap();
        let cs = pearson(&s.column(3), &labels_f64(&s));
        let ct = pearson(&t.column(3), &labels_f64(&t));
        assert!(cs.abs() > 0.5, "{cs}");
        assert_ne!(cs.signum(), ct.signum());
    }

    #[test]
    fn bad_shapes_are_config_errors() {
        let cfg = ScmConfig {
            causal_to_outcome: vec![1.0],
            ..ScmConfig::default()
        };
        assert!(matches!(generate(&cfg, Domain::Source, 5, 0), Err(Error::Config(_))));
        let cfg = ScmConfig {
            confounder_to_causal: Matrix::zeros(3, 3),
            ..ScmConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(matches!(
            generate(&ScmConfig::default(), Domain::Source, 0, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let ds = generate(&ScmConfig::default(), Domain::Target, 10, 4).unwrap();
        let back = parse_csv(&to_csv(&ds), true).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn csv_layout() {
        let ds = generate(&ScmConfig::default(), Domain::Source, 2, 4).unwrap();
        let text = to_csv(&ds);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# causal_mask=1,1,1,0,0,0");
        assert_eq!(lines[1], "# domain=source");
        assert_eq!(lines[2], "x0,x1,x2,x3,x4,x5,label");
        assert_eq!(lines.len(), 5);
    }

    #[test]
    fn non_numeric_label_reports_line() {
        let text = "# causal_mask=1,0\nx0,x1,label\n1.0,2.0,0\n3.0,4.0,cat\n";
        match parse_csv(text, true) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_label_column_is_parse_error() {
        let text = "# causal_mask=1,0\nx0,x1\n1.0,2.0\n";
        assert!(matches!(parse_csv(text, true), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn missing_mask() {
        let text = "x0,x1,label\n1.0,2.0,1\n";
        assert!(matches!(parse_csv(text, true), Err(Error::Format(_))));
        let ds = parse_csv(text, false).unwrap();
        assert_eq!(ds.causal_mask, None);
        assert_eq!(ds.domain, Domain::Source);
    }

    #[test]
    fn short_row_is_parse_error() {
        let text = "# causal_mask=1,0\nx0,x1,label\n1.0,0\n";
        assert!(matches!(parse_csv(text, true), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn pearson_known_values() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
    }
}
