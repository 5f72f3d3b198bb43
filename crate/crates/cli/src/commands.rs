//! Subcommand bodies. Each writes CSV artifacts into the output directory and records them for
//! the manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DVector;
use pdlnml::diagnostics::{scaling_benchmark, tolerance_bias_study, write_scaling_csv, write_tolerance_csv, ScalingGridSpec};
use pdlnml::model::{gen_toeplitz_data, lasso_fit, Dataset, LassoChart, LassoOptions, LikelihoodSpec, SoftThresholdMean, SphereConstraint};
use pdlnml::nml::{
    bias_diagnostic, run_path, slope_study, write_bias_csv, ComplexityConfig, ComplexityMode, OuterRegion, PathConfig, SjoPolicy,
    SlopeStudyConfig,
};
use pdlnml::oracle::{OracleConfig, OracleRadius, SelectionPolicy};
use pdlnml::projection::ProjectionConfig;
use pdlnml::sampler::{run_chain, ReverseMode, SamplerConfig, TargetKind};
use pdlnml::Error;
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, Study};

pub const DATASET_FILE: &str = "dataset.csv";
pub const META_FILE: &str = "dataset_meta.txt";

/// Output directory plus every file written so far, in emission order.
pub struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    pub fn create(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    /// Full path for `name`, recorded for the manifest.
    fn file(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> std::io::Result<()> {
        fs::write(self.file(name), text)
    }

    /// Writes `manifest.txt` with one `<sha256>  <file>` line per artifact.
    pub fn write_manifest(&self) -> std::io::Result<()> {
        let mut out = fs::File::create(self.dir.join("manifest.txt"))?;
        for name in &self.files {
            let digest = Sha256::digest(fs::read(self.dir.join(name))?);
            writeln!(out, "{}  {name}", hex::encode(digest))?;
        }
        Ok(())
    }
}

fn sampler_config(c: &RunConfig, n_samples: usize, burn_in: usize) -> SamplerConfig {
    let s = &c.sampler;
    SamplerConfig {
        n_samples,
        burn_in,
        step_scale: s.step_scale,
        oracle: OracleConfig {
            radius: OracleRadius::Relative(s.oracle_eps),
            num_samples: s.oracle_m,
            policy: if s.mean_element { SelectionPolicy::MeanElement } else { SelectionPolicy::RandomElement },
        },
        projection: ProjectionConfig { eps_feas: s.eps_feas, ..Default::default() },
        reverse: if s.symmetric_reverse { ReverseMode::Symmetric } else { ReverseMode::Verbatim },
        reverse_check: s.reverse_check,
        seed: c.data.seed,
        ..Default::default()
    }
}

fn load_dataset(c: &RunConfig) -> pdlnml::Result<Dataset> {
    let d = &c.data;
    match &d.input {
        Some(dir) => Dataset::read(&dir.join(DATASET_FILE), &dir.join(META_FILE)),
        None => gen_toeplitz_data(d.n, d.p, d.rho, d.snr, &d.beta_star, d.seed),
    }
}

pub fn gen_data(c: &RunConfig, out: &mut Outputs) -> pdlnml::Result<()> {
    let d = &c.data;
    let data = gen_toeplitz_data(d.n, d.p, d.rho, d.snr, &d.beta_star, d.seed)?;
    data.write_csv(&out.file(DATASET_FILE))?;
    data.write_meta(&out.file(META_FILE))?;
    Ok(())
}

pub fn nml_path(c: &RunConfig, out: &mut Outputs) -> pdlnml::Result<()> {
    let data = load_dataset(c)?;
    let p = &c.path;
    let seed = c.data.seed;
    let complexity = ComplexityConfig {
        mode: if p.sign_region { ComplexityMode::SignRegion } else { ComplexityMode::ActiveChart },
        region: OuterRegion::PosteriorBox { half_width_sd: p.box_half_width },
        seed,
        ..Default::default()
    };
    let cfg = PathConfig {
        lambda_min: p.lambda_min,
        lambda_max: p.lambda_max,
        grid_points: p.grid_points,
        complexity,
        cv_folds: p.cv_folds,
        fold_seed: seed,
        n_test: p.n_test,
        test_seed: seed.wrapping_add(1),
        threads: p.threads,
        chain: (p.samples > 0).then(|| sampler_config(c, p.samples, p.burn_in)),
    };
    let result = run_path(&data, &cfg)?;
    result.write_path_csv(&out.file("path.csv"))?;
    result.write_errors_csv(&out.file("path_errors.csv"))?;
    result.write_selection_csv(&out.file("selection.csv"))?;
    if p.samples > 0 {
        result.write_chain_csv(&out.file("chain_check.csv"))?;
    }
    if c.output.emit_samples {
        let nml = result.selections.iter().find(|s| s.criterion == "nml").expect("every run selects by nml");
        let opts = LassoOptions::default();
        let fit = lasso_fit(&data.x, &data.y, nml.lambda, &opts)?;
        if fit.k() == 0 {
            return Err(Error::Input("the nml-selected fit is empty; there is no level set to sample".into()));
        }
        let chart = Arc::new(LassoChart::from_fit(Arc::clone(&data.x), &fit, opts)?);
        let level = chart.level_set(fit.theta_hat.clone())?;
        let spec = LikelihoodSpec::gaussian_regression(chart.active_design().clone(), fit.theta_hat.clone(), data.meta.noise_sd);
        let chain = run_chain(&level, &data.y, &TargetKind::LikelihoodOverJacobian(spec), &sampler_config(c, p.samples, p.burn_in))?;
        chain.write_csv(&out.file("chain_trace.csv"))?;
        chain.write_samples_csv(&out.file("chain_samples.csv"), usize::MAX)?;
    }
    Ok(())
}

pub fn bench(c: &RunConfig, out: &mut Outputs) -> pdlnml::Result<()> {
    let b = &c.bench;
    let spec = ScalingGridSpec {
        n_sweep: b.n_sweep.clone(),
        n_sweep_p: b.n_sweep_p,
        p_sweep: b.p_sweep.clone(),
        p_sweep_n: b.p_sweep_n,
        k: b.k,
        rho: c.data.rho,
        snr: c.data.snr,
        seed: c.data.seed,
    };
    let report = scaling_benchmark(&spec, b.steps_per_cell, b.warmup, &sampler_config(c, 1, 0), &TargetKind::HausdorffUniform)?;
    write_scaling_csv(&report, &out.file("scaling.csv"))?;
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    out.write_text(
        "scaling_fit.csv",
        &format!("fitted_exponent_vs_n,dimension_invariance_ratio\n{},{}\n", fmt(report.fitted_exponent_vs_n), fmt(report.dimension_invariance_ratio)),
    )?;
    Ok(())
}

pub fn study(c: &RunConfig, out: &mut Outputs) -> pdlnml::Result<()> {
    let s = &c.study;
    let seed = c.data.seed;
    for which in &s.studies {
        match which {
            Study::Slope => {
                let cfg = SlopeStudyConfig {
                    ns: s.slope_ns.clone(),
                    p: s.slope_p,
                    rho: c.data.rho,
                    snr: c.data.snr,
                    beta_star: s.slope_beta_star.clone(),
                    replicates: s.slope_replicates,
                    lambda_factor: s.slope_lambda_factor,
                    box_half_width: s.slope_box_half_width,
                    seed,
                };
                let study = slope_study(&cfg)?;
                study.write_rows_csv(&out.file("slope.csv"))?;
                study.write_fit_csv(&out.file("slope_fit.csv"))?;
            }
            Study::Tolerance => {
                let level = SphereConstraint::new(s.tolerance_dim, 1.0)?;
                let x0 = DVector::from_fn(s.tolerance_dim, |i, _| if i == 0 { 1.0 } else { 0.0 });
                let mut cfg = sampler_config(c, s.tolerance_samples, s.tolerance_samples / 20);
                cfg.step_scale = Some(s.tolerance_step);
                let study = tolerance_bias_study(&level, &x0, &TargetKind::HausdorffUniform, &s.eps_list, |x| x.norm_squared(), &cfg, 100.0)?;
                if study.underpowered {
                    eprintln!("warning: tolerance study chains have fewer than 100 effective samples");
                }
                write_tolerance_csv(&study, &out.file("tolerance.csv"))?;
            }
            Study::Bias => {
                let toy = SoftThresholdMean::new(3, 0.3)?;
                let spec = LikelihoodSpec::gaussian_scalar(0.3, 1.0);
                let theta = DVector::from_element(1, 0.1);
                let cfg = OracleConfig { policy: SelectionPolicy::MeanElement, ..Default::default() };
                let honest = SjoPolicy { map: &toy, cfg };
                let same = bias_diagnostic(&toy, &theta, &spec, &honest, &honest, s.bias_bandwidth, s.bias_draws, seed)?;
                let corrupt = |x: &DVector<f64>, rng: &mut rand_chacha::ChaCha8Rng| {
                    let mut j = pdlnml::oracle::sjo_gs(&toy, x, &cfg, rng)?.jacobian;
                    let m = toy.mean(x);
                    if m > 0.3 && m < 0.6 {
                        j.matrix *= 0.5;
                    }
                    Ok(j)
                };
                let planted = bias_diagnostic(&toy, &theta, &spec, &corrupt, &honest, s.bias_bandwidth, s.bias_draws, seed)?;
                write_bias_csv(&[("identical".into(), same), ("planted_band".into(), planted)], &out.file("bias.csv"))?;
            }
        }
    }
    Ok(())
}
