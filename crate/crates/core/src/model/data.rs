use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Generation parameters and derived quantities of a synthetic regression dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub n: usize,
    pub p: usize,
    pub rho: f64,
    pub snr: f64,
    pub seed: u64,
    /// True coefficients, length `p`.
    pub beta_star: Vec<f64>,
    /// Noise standard deviation calibrated to `snr`.
    pub noise_sd: f64,
    /// Divisors applied to the raw design columns to give unit norm.
    pub column_scales: Vec<f64>,
}

impl DatasetMeta {
    pub fn true_support(&self) -> Vec<usize> {
        self.beta_star.iter().enumerate().filter(|(_, b)| **b != 0.0).map(|(j, _)| j).collect()
    }
}

/// Design matrix (N x P, unit-norm columns) and response.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Arc<DMatrix<f64>>,
    pub y: DVector<f64>,
    pub meta: DatasetMeta,
}

fn toeplitz_rows(rng: &mut ChaCha8Rng, n: usize, p: usize, rho: f64) -> DMatrix<f64> {
    let innov = (1.0 - rho * rho).sqrt();
    let mut raw = DMatrix::<f64>::zeros(n, p);
    for i in 0..n {
        let mut prev: f64 = StandardNormal.sample(rng);
        raw[(i, 0)] = prev;
        for j in 1..p {
            let z: f64 = StandardNormal.sample(rng);
            prev = rho * prev + innov * z;
            raw[(i, j)] = prev;
        }
    }
    raw
}

fn population_variance(v: &DVector<f64>) -> f64 {
    let n = v.len() as f64;
    let mean = v.sum() / n;
    v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n
}

/// Draws rows from `N(0, Sigma)` with `Sigma_ij = rho^|i-j|`, normalizes columns to unit L2 norm,
/// and adds Gaussian noise with variance `Var(X beta*) / snr`.
///
/// A zero signal falls back to unit noise variance.
pub fn gen_toeplitz_data(n: usize, p: usize, rho: f64, snr: f64, beta_star: &[f64], seed: u64) -> Result<Dataset> {
    if n < 2 || p == 0 {
        return Err(Error::Input(format!("need n >= 2 and p >= 1, got n = {n}, p = {p}")));
    }
    if !(rho.abs() < 1.0) {
        return Err(Error::Input(format!("correlation must satisfy |rho| < 1, got {rho}")));
    }
    if !(snr > 0.0) || !snr.is_finite() {
        return Err(Error::Input(format!("snr must be positive, got {snr}")));
    }
    if beta_star.len() > p {
        return Err(Error::Input(format!("beta_star has {} entries but p = {p}", beta_star.len())));
    }
    let mut beta = vec![0.0; p];
    beta[..beta_star.len()].copy_from_slice(beta_star);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = toeplitz_rows(&mut rng, n, p, rho);
    let mut scales = vec![0.0; p];
    for j in 0..p {
        let norm = x.column(j).norm();
        scales[j] = norm;
        x.column_mut(j).unscale_mut(norm);
    }
    let signal = &x * DVector::from_column_slice(&beta);
    let var_signal = population_variance(&signal);
    let noise_sd = if var_signal > 0.0 { (var_signal / snr).sqrt() } else { 1.0 };
    let noise = DVector::from_fn(n, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        noise_sd * z
    });
    let y = signal + noise;
    Ok(Dataset {
        x: Arc::new(x),
        y,
        meta: DatasetMeta { n, p, rho, snr, seed, beta_star: beta, noise_sd, column_scales: scales },
    })
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Independent draw from the generating distribution, with the training column scaling.
    pub fn draw_test_set(&self, n_test: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut x = toeplitz_rows(&mut rng, n_test, self.p(), self.meta.rho);
        for j in 0..self.p() {
            x.column_mut(j).unscale_mut(self.meta.column_scales[j]);
        }
        let beta = DVector::from_column_slice(&self.meta.beta_star);
        let sd = self.meta.noise_sd;
        let noise = DVector::from_fn(n_test, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sd * z
        });
        let y = &x * beta + noise;
        (x, y)
    }

    /// Writes `col_0..col_{P-1},y` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.p()).map(|j| format!("col_{j}")).collect();
        header.push("y".into());
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut row: Vec<String> = (0..self.p()).map(|j| format!("{}", self.x[(i, j)])).collect();
            row.push(format!("{}", self.y[i]));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the `key=value` sidecar describing how the data were generated.
    pub fn write_meta(&self, path: &Path) -> Result<()> {
        let m = &self.meta;
        let beta: Vec<String> = m.beta_star.iter().map(|b| format!("{b}")).collect();
        let mut f = File::create(path)?;
        writeln!(f, "n={}", m.n)?;
        writeln!(f, "p={}", m.p)?;
        writeln!(f, "rho={}", m.rho)?;
        writeln!(f, "snr={}", m.snr)?;
        writeln!(f, "seed={}", m.seed)?;
        writeln!(f, "beta_star={}", beta.join(","))?;
        writeln!(f, "noise_sd={}", m.noise_sd)?;
        Ok(())
    }

    /// Reads a dataset written by [`Dataset::write_csv`] and [`Dataset::write_meta`].
    ///
    /// Column scales are not stored on disk and are recovered by regenerating from the seed.
    pub fn read(csv_path: &Path, meta_path: &Path) -> Result<Dataset> {
        let mut r = csv::Reader::from_path(csv_path)?;
        let header = r.headers()?.clone();
        let p = header.len().checked_sub(1).ok_or_else(|| Error::Input("empty header".into()))?;
        if header.get(p) != Some("y") {
            return Err(Error::Input("last column must be y".into()));
        }
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let vals: std::result::Result<Vec<f64>, _> = rec.iter().map(|s| s.parse::<f64>()).collect();
            rows.push(vals.map_err(|e| Error::Input(format!("row {}: {e}", rows.len() + 2)))?);
        }
        let n = rows.len();
        let x = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
        let y = DVector::from_fn(n, |i, _| rows[i][p]);

        let mut kv = std::collections::HashMap::new();
        for (lineno, line) in BufReader::new(File::open(meta_path)?).lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Input(format!("meta line {}: expected key=value", lineno + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).cloned().ok_or_else(|| Error::Input(format!("meta is missing `{k}`")));
        let parse_f = |k: &str| -> Result<f64> {
            get(k)?.parse::<f64>().map_err(|e| Error::Input(format!("meta `{k}`: {e}")))
        };
        let beta_star: Vec<f64> = get("beta_star")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Input(format!("meta `beta_star`: {e}"))))
            .collect::<Result<_>>()?;
        let seed = get("seed")?.parse::<u64>().map_err(|e| Error::Input(format!("meta `seed`: {e}")))?;
        let rho = parse_f("rho")?;
        let snr = parse_f("snr")?;
        let noise_sd = parse_f("noise_sd")?;
        let regenerated = gen_toeplitz_data(n, p, rho, snr, &beta_star, seed)?;
        Ok(Dataset {
            x: Arc::new(x),
            y,
            meta: DatasetMeta {
                n,
                p,
                rho,
                snr,
                seed,
                beta_star: regenerated.meta.beta_star,
                noise_sd,
                column_scales: regenerated.meta.column_scales,
            },
        })
    }
}
