//! Stage orchestration. A subcommand runs its prerequisite stages in memory
//! and writes every artifact into one output directory together with
//! `manifest.json`, which records the config hash, seed, versions and the
//! SHA-256 of each artifact. A failing stage still writes the manifest, marked
//! failed and naming the stage.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use semicomp_core::glmm::{
    derive_binary_outcomes, fit_glmm, glmm_excess_ratio, GlmmError, GlmmSamples, GlmmTarget,
};
use semicomp_core::mcmc::{compute_dic, compute_lpml, run_chain, McmcError, PosteriorSamples};
use semicomp_core::metrics::{
    excess_ratios, posterior_ratio_summary, quantile_sorted, MetricsError, RatioSamples,
    RatioStatistic,
};
use semicomp_core::model::{Dataset, ModelState};
use semicomp_core::profiling::{
    cross_tab, joint_topk_label, profile, ProfileConfig, ProfileResult, ProfilingError,
};
use semicomp_core::simulate::{simulate_dataset, SimError};
use semicomp_core::streams::{derive_seed, TAG_PROFILE};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{MetricsSection, RunConfig};
use crate::io::{
    read_dataset, write_dataset, write_posterior, write_rows, AcceptanceRow, ClassificationRow,
    CrossTabRow, IngestError, ParameterRow, PosteriorDraw, RatioRow, SensitivityRow,
};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Fit,
    Metrics,
    Profile,
    Glmm,
    Report,
    Sensitivity,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Fit => "fit",
            Command::Metrics => "metrics",
            Command::Profile => "profile",
            Command::Glmm => "glmm",
            Command::Report => "report",
            Command::Sensitivity => "sensitivity",
        }
    }

    pub fn stages(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            Command::Simulate => &[Data],
            Command::Fit => &[Data, Fit],
            Command::Metrics => &[Data, Fit, Metrics],
            Command::Profile => &[Data, Fit, Metrics, Profile],
            Command::Glmm => &[Data, Glmm],
            Command::Report => &[Data, Fit, Metrics, Profile, Glmm, Report],
            Command::Sensitivity => &[Data, Fit, Sensitivity],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    Fit,
    Metrics,
    Profile,
    Glmm,
    Report,
    Sensitivity,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Data => "data",
            Stage::Fit => "fit",
            Stage::Metrics => "metrics",
            Stage::Profile => "profile",
            Stage::Glmm => "glmm",
            Stage::Report => "report",
            Stage::Sensitivity => "sensitivity",
        };
        f.write_str(s)
    }
}

/// Failure category; decides the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Config,
    Data,
    Numerical,
}

impl FailureKind {
    pub fn exit_code(self) -> i32 {
        match self {
            FailureKind::Config => 2,
            FailureKind::Data => 3,
            FailureKind::Numerical => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[error("{stage} stage failed: {message}")]
pub struct PipelineError {
    pub stage: String,
    pub kind: FailureKind,
    pub message: String,
}

impl PipelineError {
    fn new(stage: Stage, kind: FailureKind, message: impl fmt::Display) -> Self {
        Self {
            stage: stage.to_string(),
            kind,
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub tool_version: String,
    pub core_version: String,
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub completed_stages: Vec<String>,
    pub artifacts: Vec<ArtifactRecord>,
    pub failure: Option<PipelineError>,
}

impl Manifest {
    pub fn is_complete(&self) -> bool {
        self.failure.is_none()
    }
}

/// Runs `command` and writes its artifacts to `out_dir`.
pub fn run(config: &RunConfig, command: Command, out_dir: &Path) -> Result<Manifest, PipelineError> {
    let mut run = Run {
        config,
        out_dir: out_dir.to_path_buf(),
        manifest: Manifest {
            manifest_version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            core_version: semicomp_core::VERSION.to_string(),
            command: command.name().to_string(),
            seed: config.seed,
            config_hash: config.hash(),
            completed_stages: Vec::new(),
            artifacts: Vec::new(),
            failure: None,
        },
        dataset: None,
        states: Vec::new(),
        ratios: Vec::new(),
        semicomp_theta: None,
        glmm_theta: None,
        stage: Stage::Data,
    };
    fs::create_dir_all(out_dir)
        .map_err(|e| PipelineError::new(Stage::Data, FailureKind::Config, format!("{}: {e}", out_dir.display())))?;
    let result = run.execute(command);
    if let Err(e) = &result {
        run.manifest.failure = Some(e.clone());
    }
    run.write_manifest()?;
    result.map(|()| run.manifest)
}

struct Run<'a> {
    config: &'a RunConfig,
    out_dir: PathBuf,
    manifest: Manifest,
    dataset: Option<Dataset<f64>>,
    states: Vec<ModelState<f64>>,
    ratios: Vec<RatioSamples<f64>>,
    /// Posterior medians of `(θ1, θ2)` at the profiling horizon.
    semicomp_theta: Option<[Vec<f64>; 2]>,
    glmm_theta: Option<[Vec<f64>; 2]>,
    stage: Stage,
}

impl Run<'_> {
    fn execute(&mut self, command: Command) -> Result<(), PipelineError> {
        self.emit("config.toml", self.config.to_toml().into_bytes())?;
        for &stage in command.stages() {
            self.stage = stage;
            match stage {
                Stage::Data => self.data()?,
                Stage::Fit => self.fit()?,
                Stage::Metrics => self.metrics()?,
                Stage::Profile => self.profile()?,
                Stage::Glmm => self.glmm()?,
                Stage::Report => self.report()?,
                Stage::Sensitivity => self.sensitivity()?,
            }
            self.manifest.completed_stages.push(stage.to_string());
        }
        Ok(())
    }

    fn fail(&self, kind: FailureKind, message: impl fmt::Display) -> PipelineError {
        PipelineError::new(self.stage, kind, message)
    }

    fn emit(&mut self, file: &str, bytes: Vec<u8>) -> Result<(), PipelineError> {
        let path = self.out_dir.join(file);
        fs::write(&path, &bytes).map_err(|e| self.fail(FailureKind::Config, format!("{}: {e}", path.display())))?;
        self.manifest.artifacts.push(ArtifactRecord {
            file: file.to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    fn emit_csv<T: Serialize>(&mut self, file: &str, rows: &[T]) -> Result<(), PipelineError> {
        let mut buf = Vec::new();
        write_rows(rows, &mut buf).map_err(|e| self.fail(FailureKind::Config, e))?;
        self.emit(file, buf)
    }

    fn emit_json<T: Serialize>(&mut self, file: &str, value: &T) -> Result<(), PipelineError> {
        let mut buf = serde_json::to_vec_pretty(value).map_err(|e| self.fail(FailureKind::Numerical, e))?;
        buf.push(b'\n');
        self.emit(file, buf)
    }

    fn write_manifest(&self) -> Result<(), PipelineError> {
        let mut buf = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        buf.push(b'\n');
        let path = self.out_dir.join("manifest.json");
        fs::write(&path, buf).map_err(|e| self.fail(FailureKind::Config, format!("{}: {e}", path.display())))
    }

    fn dataset(&self) -> &Dataset<f64> {
        self.dataset.as_ref().expect("data stage runs first")
    }

    fn data(&mut self) -> Result<(), PipelineError> {
        let config = self.config;
        let ds = if let Some(sim) = &config.simulate {
            let out = simulate_dataset(&sim.to_config(config.seed)).map_err(|e| match e {
                SimError::Dataset(_) => self.fail(FailureKind::Numerical, e),
                _ => self.fail(FailureKind::Config, e),
            })?;
            let mut buf = Vec::new();
            write_dataset(&out.dataset, &mut buf).map_err(|e| self.fail(FailureKind::Config, e))?;
            self.emit("dataset.csv", buf)?;
            self.emit_json("truth.json", &out.truth)?;
            out.dataset
        } else if let Some(data) = &config.data {
            let file = fs::File::open(&data.input)
                .map_err(|e| self.fail(FailureKind::Config, format!("{}: {e}", data.input.display())))?;
            read_dataset(std::io::BufReader::new(file)).map_err(|e| match e {
                IngestError::Csv(ref c) if c.is_io_error() => self.fail(FailureKind::Config, e),
                _ => self.fail(FailureKind::Data, format!("{}: {e}", data.input.display())),
            })?
        } else {
            return Err(self.fail(FailureKind::Config, "no data source: add a [data] or [simulate] section"));
        };
        if ds.is_empty() {
            return Err(self.fail(FailureKind::Data, "dataset has no patients"));
        }
        self.dataset = Some(ds);
        Ok(())
    }

    fn fit(&mut self) -> Result<(), PipelineError> {
        let fit = &self.config.fit;
        let ds = self.dataset();
        let mut pooled = PosteriorSamples {
            states: Vec::new(),
            loglik: Vec::new(),
            patients: ds.len(),
            acceptance: Vec::new(),
        };
        let mut draws = Vec::new();
        let mut acceptance = Vec::new();
        for chain in 0..fit.chains {
            let cfg = fit.chain_config(self.config.seed, chain);
            let out = run_chain(ds, &cfg).map_err(|e| self.mcmc_failure(e))?;
            for (m, s) in out.states.iter().enumerate() {
                draws.push(PosteriorDraw::from_state(chain, m as u64, s));
            }
            acceptance.extend(out.acceptance.iter().map(|b| AcceptanceRow::new("semicomp", chain, b)));
            pooled.states.extend(out.states);
            pooled.loglik.extend(out.loglik);
        }
        if pooled.states.is_empty() {
            return Err(self.fail(FailureKind::Config, "fit retains no draws"));
        }
        let dic = compute_dic(&pooled, ds).map_err(|e| self.mcmc_failure(e))?;
        let lpml = compute_lpml(&pooled).map_err(|e| self.mcmc_failure(e))?;
        let summary = FitSummary {
            chains: fit.chains,
            draws: pooled.states.len(),
            dic,
            lpml: lpml.lpml,
            flagged_patients: lpml.flagged,
        };

        let mut buf = Vec::new();
        write_posterior(&draws, ds.covariate_names(), ds.hospital_ids(), &mut buf)
            .map_err(|e| self.fail(FailureKind::Config, e))?;
        self.emit("posterior.csv", buf)?;
        self.emit_csv("acceptance.csv", &acceptance)?;
        self.emit_json("fit_summary.json", &summary)?;
        self.states = pooled.states;
        Ok(())
    }

    fn mcmc_failure(&self, e: McmcError) -> PipelineError {
        let kind = match e {
            McmcError::Config(_) => FailureKind::Config,
            _ => FailureKind::Numerical,
        };
        self.fail(kind, e)
    }

    fn metrics_failure(&self, e: MetricsError) -> PipelineError {
        let kind = match e {
            MetricsError::BadGrid | MetricsError::Quadrature(_) => FailureKind::Config,
            _ => FailureKind::Numerical,
        };
        self.fail(kind, e)
    }

    fn metrics(&mut self) -> Result<(), PipelineError> {
        let section = &self.config.metrics;
        let ratios = excess_ratios(self.dataset(), &self.states, &section.grid, &section.config())
            .map_err(|e| self.metrics_failure(e))?;
        let ids = self.dataset().hospital_ids();
        let rows: Vec<RatioRow> = ratios
            .iter()
            .flat_map(|rs| {
                posterior_ratio_summary(rs).into_iter().map(|r| RatioRow {
                    hospital_id: ids[r.hospital],
                    t: r.t,
                    statistic: r.statistic,
                    median: r.median,
                    lo95: r.lo95,
                    hi95: r.hi95,
                })
            })
            .collect();
        self.emit_csv("ratios.csv", &rows)?;
        self.ratios = ratios;
        Ok(())
    }

    /// Sample-major `θ` draws of every hospital at the profiling horizon.
    fn theta_draws(&self, stat: RatioStatistic) -> Vec<Vec<f64>> {
        let h = self.config.horizon();
        let k = self.config.metrics.grid.iter().position(|t| *t == h).expect("validated horizon");
        (0..self.states.len())
            .map(|m| self.ratios.iter().map(|rs| rs.get(stat, m, k)).collect())
            .collect()
    }

    fn profile(&mut self) -> Result<(), PipelineError> {
        let theta1 = self.theta_draws(RatioStatistic::Theta1);
        let theta2 = self.theta_draws(RatioStatistic::Theta2);
        let section = &self.config.profile;
        let seed = self.config.seed;
        let runs: [(&str, ProfileConfig, &[Vec<f64>], Option<&[Vec<f64>]>); 3] = [
            ("topk_readmission", section.topk(), &theta1, None),
            ("topk_death", section.topk(), &theta2, None),
            ("quadrant", section.quadrant(), &theta1, Some(&theta2)),
        ];
        let mut results: Vec<(&str, ProfileResult)> = Vec::new();
        for (i, (name, cfg, t1, t2)) in runs.into_iter().enumerate() {
            let r = profile(&cfg, t1, t2, derive_seed(seed, TAG_PROFILE, i as u64))
                .map_err(|e| self.profiling_failure(name, e))?;
            results.push((name, r));
        }

        let ids = self.dataset().hospital_ids();
        let mut rows = Vec::new();
        let mut tabs = Vec::new();
        for (name, r) in &results {
            for (j, id) in ids.iter().enumerate() {
                let p = &r.marginals[j];
                let cat = |c: u8| {
                    r.scheme.categories().iter().position(|x| *x == c).map(|i| p[i])
                };
                rows.push(ClassificationRow {
                    hospital_id: *id,
                    scheme: name.to_string(),
                    plug_in: r.plug_in.labels[j],
                    loss_based: r.loss_based[j],
                    p0: cat(0),
                    p1: cat(1),
                    p2: cat(2),
                    p3: cat(3),
                    p4: cat(4),
                    plug_in_risk: r.plug_in_risk,
                    risk: r.risk,
                });
            }
            tabs.extend(table_rows(
                name,
                &cross_tab(&r.plug_in.labels, &r.loss_based, r.scheme.categories()),
                r.scheme.categories(),
            ));
        }
        let joint = |f: &dyn Fn(&ProfileResult) -> &[u8]| -> Vec<u8> {
            f(&results[0].1)
                .iter()
                .zip(f(&results[1].1))
                .map(|(r, d)| joint_topk_label(*r, *d))
                .collect()
        };
        let plug = joint(&|r| &r.plug_in.labels);
        let loss = joint(&|r| &r.loss_based);
        tabs.extend(table_rows("topk_joint", &cross_tab(&plug, &loss, &[1, 2, 3, 4]), &[1, 2, 3, 4]));

        self.emit_csv("classification.csv", &rows)?;
        self.emit_csv("crosstabs.csv", &tabs)?;
        self.semicomp_theta = Some([&theta1, &theta2].map(|t| column_medians(t)));
        Ok(())
    }

    fn profiling_failure(&self, scheme: &str, e: ProfilingError) -> PipelineError {
        let kind = match e {
            ProfilingError::BadFraction(_)
            | ProfilingError::BadEpsilon(_)
            | ProfilingError::BadWeights(_) => FailureKind::Config,
            _ => FailureKind::Numerical,
        };
        self.fail(kind, format!("{scheme}: {e}"))
    }

    fn glmm_window(&self) -> f64 {
        self.config.glmm.window.unwrap_or_else(|| self.config.horizon())
    }

    fn glmm(&mut self) -> Result<(), PipelineError> {
        let section = &self.config.glmm;
        let window = self.glmm_window();
        let ids = self.dataset().hospital_ids().to_vec();
        let mut ratio_rows = Vec::new();
        let mut params = Vec::new();
        let mut acceptance = Vec::new();
        let mut medians = Vec::new();
        for (chain, (target, suffix)) in [(GlmmTarget::Readmission, "readmit"), (GlmmTarget::Death, "death")]
            .into_iter()
            .enumerate()
        {
            let data = derive_binary_outcomes(self.dataset(), window, target).map_err(|e| self.glmm_failure(e))?;
            let cfg = section.chain_config(self.config.seed, chain as u64);
            let samples = fit_glmm(&data, &cfg).map_err(|e| self.glmm_failure(e))?;
            let r = glmm_excess_ratio(&data, &samples, section.hermite_nodes)
                .map_err(|e| self.glmm_failure(e))?;
            for (stat, values) in [("mu_A", &r.mu_a), ("mu_S", &r.mu_s), ("theta", &r.theta)] {
                for (j, id) in ids.iter().enumerate() {
                    let (median, lo95, hi95) = summarize(values.iter().map(|row| row[j]).collect());
                    ratio_rows.push(RatioRow {
                        hospital_id: *id,
                        t: window,
                        statistic: format!("{stat}_glmm_{suffix}"),
                        median,
                        lo95,
                        hi95,
                    });
                }
            }
            params.extend(parameter_rows(suffix, &data.covariate_names, &samples));
            acceptance.extend(
                samples
                    .acceptance
                    .iter()
                    .map(|b| AcceptanceRow::new(&format!("glmm_{suffix}"), chain as u64, b)),
            );
            medians.push(column_medians(&r.theta));
        }
        self.emit_csv("glmm_ratios.csv", &ratio_rows)?;
        self.emit_csv("glmm_parameters.csv", &params)?;
        self.emit_csv("glmm_acceptance.csv", &acceptance)?;
        let [a, b]: [Vec<f64>; 2] = medians.try_into().expect("two targets");
        self.glmm_theta = Some([a, b]);
        Ok(())
    }

    fn glmm_failure(&self, e: GlmmError) -> PipelineError {
        let kind = match e {
            GlmmError::Config(_) | GlmmError::BadWindow(_) | GlmmError::Quadrature(_) => FailureKind::Config,
            _ => FailureKind::Numerical,
        };
        self.fail(kind, e)
    }

    /// GLMM versus semi-competing classification of each hospital as above
    /// (1) or not above (0) its expected rate.
    fn report(&mut self) -> Result<(), PipelineError> {
        if self.glmm_window() != self.config.horizon() {
            return Err(self.fail(
                FailureKind::Config,
                "glmm.window must equal the profiling horizon for the report",
            ));
        }
        let (Some(sc), Some(gl)) = (&self.semicomp_theta, &self.glmm_theta) else {
            unreachable!("report runs after profile and glmm")
        };
        let above = |t: &[f64]| -> Vec<u8> { t.iter().map(|v| u8::from(*v > 1.0)).collect() };
        let mut tabs = Vec::new();
        let mut outcomes = Vec::new();
        for (k, name) in ["readmission", "death"].iter().enumerate() {
            let (g, s) = (above(&gl[k]), above(&sc[k]));
            let t = cross_tab(&g, &s, &[0, 1]);
            tabs.extend(table_rows(&format!("glmm_vs_semicomp_{name}"), &t, &[0, 1]));
            outcomes.push(Reclassification {
                outcome: name.to_string(),
                winners: t[1][0],
                losers: t[0][1],
                unchanged: t[0][0] + t[1][1],
            });
        }
        self.emit_csv("reclassification.csv", &tabs)?;
        self.emit_json(
            "report.json",
            &Report {
                horizon: self.config.horizon(),
                hospitals: self.dataset().n_hospitals(),
                patients: self.dataset().len(),
                reclassification: outcomes,
            },
        )
    }

    fn sensitivity(&mut self) -> Result<(), PipelineError> {
        let grid = self.config.sensitivity.grid.clone().unwrap_or_else(|| self.config.metrics.grid.clone());
        let rows = node_ladder(
            self.dataset(),
            &self.states,
            &grid,
            &self.config.metrics,
            &self.config.sensitivity.nodes,
        )
        .map_err(|e| self.metrics_failure(e))?;
        self.emit_csv("sensitivity.csv", &rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub chains: u64,
    pub draws: usize,
    pub dic: f64,
    pub lpml: f64,
    /// Patients whose conditional predictive ordinate is not finite.
    pub flagged_patients: Vec<usize>,
}

/// Hospitals moved across the expected-rate line by the semi-competing
/// analysis: winners go from above to not above, losers the other way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reclassification {
    pub outcome: String,
    pub winners: usize,
    pub losers: usize,
    pub unchanged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub horizon: f64,
    pub hospitals: usize,
    pub patients: usize,
    pub reclassification: Vec<Reclassification>,
}

fn table_rows(name: &str, table: &[Vec<usize>], categories: &[u8]) -> Vec<CrossTabRow> {
    let mut rows = Vec::new();
    for (i, r) in categories.iter().enumerate() {
        for (k, c) in categories.iter().enumerate() {
            rows.push(CrossTabRow {
                table: name.to_string(),
                row: *r,
                col: *c,
                count: table[i][k],
            });
        }
    }
    rows
}

/// Median and central 95% interval; NaN if any draw is NaN.
fn summarize(mut d: Vec<f64>) -> (f64, f64, f64) {
    if d.is_empty() || d.iter().any(|v| v.is_nan()) {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    d.sort_by(f64::total_cmp);
    (
        quantile_sorted(&d, 0.5),
        quantile_sorted(&d, 0.025),
        quantile_sorted(&d, 0.975),
    )
}

fn column_medians(draws: &[Vec<f64>]) -> Vec<f64> {
    let j = draws.first().map_or(0, Vec::len);
    (0..j).map(|h| summarize(draws.iter().map(|r| r[h]).collect()).0).collect()
}

fn parameter_rows(target: &str, names: &[String], s: &GlmmSamples) -> Vec<ParameterRow> {
    let mut rows: Vec<ParameterRow> = names
        .iter()
        .enumerate()
        .map(|(k, n)| {
            let (median, lo95, hi95) = summarize(s.beta.iter().map(|b| b[k]).collect());
            ParameterRow {
                target: target.to_string(),
                parameter: n.clone(),
                median,
                lo95,
                hi95,
            }
        })
        .collect();
    let (median, lo95, hi95) = summarize(s.sigma2.clone());
    rows.push(ParameterRow {
        target: target.to_string(),
        parameter: "sigma2_v".into(),
        median,
        lo95,
        hi95,
    });
    rows
}

/// Worst relative change of every ratio statistic when the node count drops
/// from the largest entry of `nodes` to each other entry. The comparison runs
/// over all hospitals, posterior states and horizons.
pub fn node_ladder(
    dataset: &Dataset<f64>,
    states: &[ModelState<f64>],
    grid: &[f64],
    metrics: &MetricsSection,
    nodes: &[usize],
) -> Result<Vec<SensitivityRow>, MetricsError> {
    let reference_nodes = *nodes.iter().max().ok_or(MetricsError::NoSamples)?;
    let reference = excess_ratios(dataset, states, grid, &metrics.with_nodes(reference_nodes))?;
    let mut rows = Vec::new();
    for &k in nodes.iter().filter(|k| **k != reference_nodes) {
        let other = excess_ratios(dataset, states, grid, &metrics.with_nodes(k))?;
        for stat in RatioStatistic::ALL {
            let mut worst = 0.0f64;
            for (a, b) in other.iter().zip(&reference) {
                for t in 0..grid.len() {
                    for m in 0..states.len() {
                        let (x, y) = (a.get(stat, m, t), b.get(stat, m, t));
                        let d = if y == 0.0 { (x - y).abs() } else { ((x - y) / y).abs() };
                        worst = if d.is_nan() || worst.is_nan() { f64::NAN } else { worst.max(d) };
                    }
                }
            }
            rows.push(SensitivityRow {
                nodes: k,
                reference_nodes,
                statistic: stat.name().to_string(),
                max_rel_diff: worst,
            });
        }
    }
    Ok(rows)
}
