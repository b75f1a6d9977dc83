//! Flat `key=value` run configuration.
//!
//! Every key has a default; a config file only lists overrides. `#` starts
//! a comment. Unknown or repeated keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::consistency::ConsistencyWeights;
use crate::dcats::DcatsParams;
use crate::degradation::DegradationConfig;
use crate::diffusion::DiffusionSchedule;
use crate::fingerprint::hash_lines;
use crate::linesearch::WolfeParams;
use crate::phantom::PhantomSpec;

use super::CliError;

/// `(key, default)`; path keys are excluded from the fingerprint.
const KEYS: &[(&str, &str)] = &[
    ("data_dir", "data"),
    ("bank_file", ""),
    // phantom and datasets
    ("phantom_size", "72"),
    ("phantom_templates", "8"),
    ("phantom_seed", "0"),
    ("sigma_p", "0.05"),
    ("n_ref", "16"),
    ("n_test", "50"),
    ("data_seed", "1"),
    // in-distribution degradation and its shifted variants
    ("gamma", "0.7"),
    ("blur_sigma", "1.0"),
    ("blur_radius", "3"),
    ("factor_k", "2"),
    ("noise_sigma", "0.02"),
    ("gamma_floor", "0.000001"),
    ("ood_gamma", "0.4"),
    ("ood_factor_k", "3"),
    // diffusion schedule
    ("T", "1000"),
    ("beta_min", "0.0001"),
    ("beta_max", "0.02"),
    // consistency loss
    ("lambda1", "0.5"),
    ("lambda2", "0.1"),
    ("ssim_window", "11"),
    ("ssim_k1", "0.01"),
    ("ssim_k2", "0.03"),
    // line search
    ("wolfe_c1", "0.0001"),
    ("wolfe_c2", "0.9"),
    ("wolfe_alpha_init", "1.0"),
    ("wolfe_alpha_max", "100.0"),
    ("wolfe_max_iters", "25"),
    // start-time selection
    ("tau", "0.4"),
    ("t_grid_stride", "25"),
    ("n_draws", "4"),
    ("bank_seed", "2"),
    // conditional model
    ("conditional", "ridge"),
    ("patch_in", "5"),
    ("ridge_lambda", "0.001"),
    // solve and evaluate
    ("rho", "1.0"),
    ("solve_seed", "3"),
    ("t_start_override", "none"),
    ("pinv_eps", "0.0001"),
];

const PATH_KEYS: &[&str] = &["data_dir", "bank_file"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Ind,
    OodContrast,
    OodRes,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Ind, Partition::OodContrast, Partition::OodRes];

    pub fn as_str(&self) -> &'static str {
        match self {
            Partition::Ind => "ind",
            Partition::OodContrast => "ood-contrast",
            Partition::OodRes => "ood-res",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
    base_dir: PathBuf,
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::Config(format!("`{key}`: cannot parse {v:?}")))
}

impl RunConfig {
    pub fn defaults(base_dir: impl Into<PathBuf>) -> Self {
        Self {
            values: KEYS.iter().map(|(k, v)| (*k, v.to_string())).collect(),
            base_dir: base_dir.into(),
        }
    }

    /// Parses config text; relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, CliError> {
        let mut cfg = Self::defaults(base_dir);
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key=value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(CliError::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let slot = KEYS
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(k, _)| *k)
            .ok_or_else(|| CliError::Config(format!("unknown key `{key}`")))?;
        self.values.insert(slot, value.to_string());
        Ok(())
    }

    fn raw(&self, key: &str) -> &str {
        &self.values[key]
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError> {
        parse_value(key, self.raw(key))
    }

    /// Checks that every typed accessor succeeds and the parameter blocks
    /// are internally valid.
    pub fn validate(&self) -> Result<(), CliError> {
        self.phantom()?.validate()?;
        for p in Partition::ALL {
            let d = self.degradation(p)?;
            d.validate_for(self.phantom()?.size, self.phantom()?.size)?;
        }
        self.schedule()?;
        self.weights()?.validate()?;
        self.wolfe()?.validate()?;
        self.dcats()?.validate()?;
        self.get::<usize>("n_ref")?;
        self.get::<usize>("n_test")?;
        self.get::<u64>("data_seed")?;
        self.get::<usize>("n_draws")?;
        self.get::<u64>("bank_seed")?;
        self.get::<usize>("patch_in")?;
        self.get::<f64>("ridge_lambda")?;
        self.get::<f64>("rho")?;
        self.get::<u64>("solve_seed")?;
        self.get::<f64>("pinv_eps")?;
        self.t_start_override()?;
        match self.raw("conditional") {
            "ridge" | "naive" => {}
            other => return Err(CliError::Config(format!("`conditional`: unknown model {other:?}"))),
        }
        if self.n_ref()? == 0 || self.n_test()? == 0 {
            return Err(CliError::Config("`n_ref` and `n_test` must be positive".into()));
        }
        Ok(())
    }

    /// Sorted `key=value` lines of every non-path setting.
    pub fn canonical_lines(&self) -> Vec<String> {
        self.values
            .iter()
            .filter(|(k, _)| !PATH_KEYS.contains(k))
            .map(|(k, v)| format!("{k}={v}"))
            .collect()
    }

    pub fn fingerprint(&self) -> String {
        hash_lines(self.canonical_lines())
    }

    fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.resolve(self.raw("data_dir"))
    }

    pub fn bank_file(&self) -> Option<PathBuf> {
        let raw = self.raw("bank_file");
        (!raw.is_empty()).then(|| self.resolve(raw))
    }

    pub fn phantom(&self) -> Result<PhantomSpec, CliError> {
        Ok(PhantomSpec {
            size: self.get("phantom_size")?,
            n_templates: self.get("phantom_templates")?,
            sigma_p: self.get("sigma_p")?,
            seed: self.get("phantom_seed")?,
            ..PhantomSpec::default()
        })
    }

    pub fn n_ref(&self) -> Result<usize, CliError> {
        self.get("n_ref")
    }

    pub fn n_test(&self) -> Result<usize, CliError> {
        self.get("n_test")
    }

    pub fn data_seed(&self) -> Result<u64, CliError> {
        self.get("data_seed")
    }

    /// The degradation the conditional model is trained under.
    pub fn training_degradation(&self) -> Result<DegradationConfig, CliError> {
        self.degradation(Partition::Ind)
    }

    pub fn degradation(&self, p: Partition) -> Result<DegradationConfig, CliError> {
        let mut d = DegradationConfig {
            gamma: self.get("gamma")?,
            blur_sigma: self.get("blur_sigma")?,
            blur_radius: self.get("blur_radius")?,
            factor_k: self.get("factor_k")?,
            noise_sigma: self.get("noise_sigma")?,
            gamma_floor: self.get("gamma_floor")?,
        };
        match p {
            Partition::Ind => {}
            Partition::OodContrast => d.gamma = self.get("ood_gamma")?,
            Partition::OodRes => d.factor_k = self.get("ood_factor_k")?,
        }
        d.validate()?;
        Ok(d)
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule, CliError> {
        Ok(DiffusionSchedule::linear(
            self.get("T")?,
            self.get("beta_min")?,
            self.get("beta_max")?,
        )?)
    }

    pub fn weights(&self) -> Result<ConsistencyWeights, CliError> {
        Ok(ConsistencyWeights {
            lambda1: self.get("lambda1")?,
            lambda2: self.get("lambda2")?,
            ssim_window: self.get("ssim_window")?,
            ssim_k1: self.get("ssim_k1")?,
            ssim_k2: self.get("ssim_k2")?,
            peak: 1.0,
        })
    }

    pub fn wolfe(&self) -> Result<WolfeParams, CliError> {
        Ok(WolfeParams {
            c1: self.get("wolfe_c1")?,
            c2: self.get("wolfe_c2")?,
            alpha_init: self.get("wolfe_alpha_init")?,
            alpha_max: self.get("wolfe_alpha_max")?,
            max_iters: self.get("wolfe_max_iters")?,
        })
    }

    pub fn dcats(&self) -> Result<DcatsParams, CliError> {
        Ok(DcatsParams {
            tau: self.get("tau")?,
            t_grid_stride: self.get("t_grid_stride")?,
        })
    }

    pub fn n_draws(&self) -> Result<usize, CliError> {
        self.get("n_draws")
    }

    pub fn bank_seed(&self) -> Result<u64, CliError> {
        self.get("bank_seed")
    }

    pub fn conditional(&self) -> &str {
        self.raw("conditional")
    }

    pub fn patch_in(&self) -> Result<usize, CliError> {
        self.get("patch_in")
    }

    pub fn ridge_lambda(&self) -> Result<f64, CliError> {
        self.get("ridge_lambda")
    }

    pub fn rho(&self) -> Result<f64, CliError> {
        self.get("rho")
    }

    pub fn solve_seed(&self) -> Result<u64, CliError> {
        self.get("solve_seed")
    }

    pub fn pinv_eps(&self) -> Result<f64, CliError> {
        self.get("pinv_eps")
    }

    pub fn t_start_override(&self) -> Result<Option<usize>, CliError> {
        match self.raw("t_start_override") {
            "none" | "" => Ok(None),
            v => Ok(Some(parse_value("t_start_override", v)?)),
        }
    }
}
