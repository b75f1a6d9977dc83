//! Command implementations and the on-disk data layout.
//!
//! ```text
//! <data_dir>/templates/template_KK.{raw,pgm}, labels_KK.pgm
//! <data_dir>/<partition>/{ref,test}/sample_NNNNNN_{truth.raw,y.raw,labels.pgm,truth.pgm,y.pgm}
//! <data_dir>/manifest_<partition>.txt
//! <data_dir>/conditional_ridge.bin
//! <data_dir>/bank_<partition>.txt
//! <data_dir>/solve_<partition>_<mode>/sample_NNNNNN_{out.raw,out.pgm,cond.raw,report.txt}
//! <data_dir>/eval_<partition>.csv, montage_<partition>_NNNNNN.pgm
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::conditional::{bilinear_resize, ridge_fit, ConditionalModel, NaiveModel, RidgeModel};
use crate::dcats::build_memory_bank;
use crate::degradation::DegradationConfig;
use crate::diffusion::GaussianMixturePrior;
use crate::error::Error;
use crate::fingerprint::hash_lines;
use crate::image::{Image, LabelMap};
use crate::io;
use crate::metrics::{hallucination_decompose, psnr, region_volume_error, ssim_aggregate};
use crate::phantom::{make_dataset, Phantom};
use crate::rng::derive_seed;
use crate::solver::{self, Mode, SolveParams};

use super::config::{Partition, RunConfig};
use super::CliError;

/// Test samples start at this global index so that reference and test
/// truths never share a seed.
pub const TEST_INDEX_OFFSET: u64 = 1 << 32;

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Ref,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Ref => "ref",
            Split::Test => "test",
        }
    }
}

/// One stored sample.
#[derive(Debug, Clone)]
pub struct StoredSample {
    pub id: usize,
    pub x_true: Image,
    pub y: Image,
    pub labels: LabelMap,
}

pub fn manifest_path(cfg: &RunConfig, p: Partition) -> PathBuf {
    cfg.data_dir().join(format!("manifest_{}.txt", p.as_str()))
}

pub fn ridge_path(cfg: &RunConfig) -> PathBuf {
    cfg.data_dir().join("conditional_ridge.bin")
}

pub fn bank_path(cfg: &RunConfig, p: Partition) -> PathBuf {
    cfg.bank_file()
        .unwrap_or_else(|| cfg.data_dir().join(format!("bank_{}.txt", p.as_str())))
}

pub fn solve_dir(cfg: &RunConfig, p: Partition, mode: Mode) -> PathBuf {
    cfg.data_dir().join(format!("solve_{}_{}", p.as_str(), mode.as_str()))
}

pub fn csv_path(cfg: &RunConfig, p: Partition) -> PathBuf {
    cfg.data_dir().join(format!("eval_{}.csv", p.as_str()))
}

pub fn montage_path(cfg: &RunConfig, p: Partition, id: usize) -> PathBuf {
    cfg.data_dir().join(format!("montage_{}_{id:06}.pgm", p.as_str()))
}

fn split_dir(cfg: &RunConfig, p: Partition, split: Split) -> PathBuf {
    cfg.data_dir().join(p.as_str()).join(split.as_str())
}

fn sample_file(dir: &Path, id: usize, suffix: &str) -> PathBuf {
    dir.join(format!("sample_{id:06}_{suffix}"))
}

fn template_dir(cfg: &RunConfig) -> PathBuf {
    cfg.data_dir().join("templates")
}

/// Fingerprint of the generated data of one partition.
pub fn data_fingerprint(cfg: &RunConfig, p: Partition) -> CliResult<String> {
    let mut lines = cfg.phantom()?.canonical_lines();
    lines.extend(cfg.degradation(p)?.canonical_lines());
    lines.push(format!("data_seed={}", cfg.data_seed()?));
    lines.push(format!("n_ref={}", cfg.n_ref()?));
    lines.push(format!("n_test={}", cfg.n_test()?));
    Ok(hash_lines(lines))
}

pub fn phantom_gen(cfg: &RunConfig, p: Partition, force: bool) -> CliResult<Vec<String>> {
    let manifest = manifest_path(cfg, p);
    if manifest.exists() && !force {
        return Err(CliError::Collision(manifest.display().to_string()));
    }
    let phantom = Phantom::new(cfg.phantom()?)?;
    let tdir = template_dir(cfg);
    for (k, (t, l)) in phantom.templates.iter().zip(&phantom.labels).enumerate() {
        io::write_raw(&tdir.join(format!("template_{k:02}.raw")), t)?;
        io::write_pgm(&tdir.join(format!("template_{k:02}.pgm")), t)?;
        io::write_labels(&tdir.join(format!("labels_{k:02}.pgm")), l)?;
    }
    let d = cfg.degradation(p)?;
    let seed = cfg.data_seed()?;
    let mut rows = Vec::new();
    for (split, n, offset) in [
        (Split::Ref, cfg.n_ref()?, 0),
        (Split::Test, cfg.n_test()?, TEST_INDEX_OFFSET),
    ] {
        let dir = split_dir(cfg, p, split);
        let samples = make_dataset(&phantom, &d, n, offset, seed)?;
        for (id, s) in samples.iter().enumerate() {
            io::write_raw(&sample_file(&dir, id, "truth.raw"), &s.x_true)?;
            io::write_raw(&sample_file(&dir, id, "y.raw"), &s.y)?;
            io::write_labels(&sample_file(&dir, id, "labels.pgm"), &s.labels)?;
            io::write_pgm(&sample_file(&dir, id, "truth.pgm"), &s.x_true)?;
            io::write_pgm(&sample_file(&dir, id, "y.pgm"), &s.y)?;
            rows.push(format!("{} {id} {} {}", split.as_str(), s.seed, s.template));
        }
    }
    let mut text = format!(
        "# partition={}\n# data_fingerprint={}\n# cfg_fingerprint={}\n# columns: split id seed template\n",
        p.as_str(),
        data_fingerprint(cfg, p)?,
        d.fingerprint()
    );
    rows.iter().for_each(|r| {
        text.push_str(r);
        text.push('\n');
    });
    io::atomic_write(&manifest, text.as_bytes())?;
    Ok(vec![format!(
        "phantom-gen partition={} ref={} test={} manifest={} hash={}",
        p.as_str(),
        cfg.n_ref()?,
        cfg.n_test()?,
        manifest.display(),
        crate::fingerprint::hash_bytes(text.as_bytes())
    )])
}

fn manifest_meta(text: &str, key: &str) -> Option<String> {
    text.lines()
        .filter_map(|l| l.strip_prefix('#'))
        .filter_map(|l| l.trim().split_once('='))
        .find(|(k, _)| k.trim() == key)
        .map(|(_, v)| v.trim().to_string())
}

/// Loads one split after checking the manifest fingerprint.
pub fn load_split(cfg: &RunConfig, p: Partition, split: Split) -> CliResult<Vec<StoredSample>> {
    let manifest = manifest_path(cfg, p);
    let text = io::read_text(&manifest)?;
    let expected = data_fingerprint(cfg, p)?;
    let found = manifest_meta(&text, "data_fingerprint").unwrap_or_default();
    if found != expected {
        return Err(Error::FingerprintMismatch { expected, found }.into());
    }
    let dir = split_dir(cfg, p, split);
    let ids: Vec<usize> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .filter_map(|l| {
            let mut cols = l.split_whitespace();
            (cols.next() == Some(split.as_str())).then(|| cols.next()?.parse().ok())?
        })
        .collect();
    if ids.is_empty() {
        return Err(Error::MissingArtifact(format!("{} samples of partition {}", split.as_str(), p.as_str())).into());
    }
    ids.into_iter()
        .map(|id| {
            Ok(StoredSample {
                id,
                x_true: io::read_raw(&sample_file(&dir, id, "truth.raw"))?,
                y: io::read_raw(&sample_file(&dir, id, "y.raw"))?,
                labels: io::read_labels(&sample_file(&dir, id, "labels.pgm"))?,
            })
        })
        .collect()
}

/// The mixture prior over the stored templates.
pub fn load_prior(cfg: &RunConfig) -> CliResult<GaussianMixturePrior> {
    let spec = cfg.phantom()?;
    let tdir = template_dir(cfg);
    let templates = (0..spec.n_templates)
        .map(|k| io::read_raw(&tdir.join(format!("template_{k:02}.raw"))))
        .collect::<Result<Vec<_>, _>>()?;
    let k = templates.len();
    Ok(GaussianMixturePrior::new(templates, vec![1.0 / k as f64; k], spec.sigma_p)?)
}

pub fn fit_conditional(cfg: &RunConfig) -> CliResult<Vec<String>> {
    let train = cfg.training_degradation()?;
    let refs = load_split(cfg, Partition::Ind, Split::Ref)?;
    let pairs: Vec<(Image, Image)> = refs.into_iter().map(|s| (s.x_true, s.y)).collect();
    let start = Instant::now();
    let model = ridge_fit(&pairs, cfg.patch_in()?, train.factor_k, cfg.ridge_lambda()?, train.fingerprint())?;
    let path = ridge_path(cfg);
    io::write_ridge(&path, &model)?;
    Ok(vec![format!(
        "fit-conditional pairs={} patch_in={} k={} lambda={} time={:.3}s model={}",
        pairs.len(),
        model.patch_in,
        model.scale_k,
        model.ridge_lambda,
        start.elapsed().as_secs_f64(),
        path.display()
    )])
}

pub fn bank_build(cfg: &RunConfig, p: Partition) -> CliResult<Vec<String>> {
    let refs = load_split(cfg, p, Split::Ref)?;
    let prior = load_prior(cfg)?;
    let sched = cfg.schedule()?;
    let d = cfg.degradation(p)?;
    let pairs: Vec<(Image, Image)> = refs.into_iter().map(|s| (s.x_true, s.y)).collect();
    let start = Instant::now();
    let bank = build_memory_bank(&pairs, &prior, &sched, &d, &cfg.dcats()?, cfg.n_draws()?, cfg.bank_seed()?)?;
    let path = bank_path(cfg, p);
    io::write_bank(&path, &bank)?;
    let last = bank.len() - 1;
    Ok(vec![format!(
        "bank-build partition={} grid={} t=[{}..{}] avg_loglik=[{:.4}..{:.4}] refs={} draws={} evaluations={} time={:.3}s bank={}",
        p.as_str(),
        bank.len(),
        bank.t_grid[0],
        bank.t_grid[last],
        bank.avg_loglik[0],
        bank.avg_loglik[last],
        bank.n_refs,
        bank.n_draws,
        bank.evaluations,
        start.elapsed().as_secs_f64(),
        path.display()
    )])
}

/// Feeds measurements of any size to a model that expects the training
/// measurement size, resizing bilinearly when they differ.
pub struct Resized<M> {
    pub inner: M,
    pub lf_dims: (usize, usize),
}

impl<M: ConditionalModel> ConditionalModel for Resized<M> {
    fn predict(&self, y: &Image) -> crate::Result<Image> {
        if y.dims() == self.lf_dims {
            self.inner.predict(y)
        } else {
            self.inner.predict(&bilinear_resize(y, self.lf_dims.0, self.lf_dims.1))
        }
    }

    fn name(&self) -> &str {
        self.inner.name()
    }
}

/// The configured conditional model, adapted to the training size.
pub fn load_conditional(cfg: &RunConfig) -> CliResult<Box<dyn ConditionalModel + Sync>> {
    let train = cfg.training_degradation()?;
    let size = cfg.phantom()?.size;
    let lf_dims = train.measurement_dims(size, size);
    match cfg.conditional() {
        "ridge" => {
            let model: RidgeModel = io::read_ridge(&ridge_path(cfg))?;
            let expected = train.fingerprint();
            if model.trained_on != expected {
                return Err(Error::FingerprintMismatch {
                    expected,
                    found: model.trained_on,
                }
                .into());
            }
            Ok(Box::new(Resized { inner: model, lf_dims }))
        }
        _ => Ok(Box::new(Resized {
            inner: NaiveModel { cfg_assumed: train },
            lf_dims,
        })),
    }
}

pub fn solve_params(cfg: &RunConfig, mode: Mode) -> CliResult<SolveParams> {
    Ok(SolveParams {
        mode,
        rho: cfg.rho()?,
        wolfe: cfg.wolfe()?,
        dcats: cfg.dcats()?,
        weights: cfg.weights()?,
        seed: cfg.solve_seed()?,
        t_start_override: cfg.t_start_override()?,
    })
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

pub fn solve(cfg: &RunConfig, p: Partition, mode: Mode) -> CliResult<Vec<String>> {
    let samples = load_split(cfg, p, Split::Test)?;
    let prior = load_prior(cfg)?;
    let sched = cfg.schedule()?;
    let d = cfg.degradation(p)?;
    let conditional = load_conditional(cfg)?;
    let base = solve_params(cfg, mode)?;
    let bank = match (mode, base.t_start_override) {
        (Mode::Dynamic, None) => Some(io::read_bank(&bank_path(cfg, p))?),
        _ => None,
    };
    if let Some(b) = &bank {
        let expected = crate::dcats::pipeline_fingerprint(&d, &sched, &prior);
        if b.fingerprint != expected {
            return Err(Error::FingerprintMismatch {
                expected,
                found: b.fingerprint.clone(),
            }
            .into());
        }
    }

    let start = Instant::now();
    let results: Vec<(usize, solver::SolveReport, f64)> = samples
        .par_iter()
        .map(|s| {
            let params = SolveParams {
                seed: derive_seed(base.seed, s.id as u64),
                ..base
            };
            let t0 = Instant::now();
            conditional.predict(&s.y)?;
            let cond_time = t0.elapsed().as_secs_f64();
            let r = solver::solve(&s.y, conditional.as_ref(), &prior, &sched, &d, bank.as_ref(), &params)?;
            Ok((s.id, r, cond_time))
        })
        .collect::<crate::Result<_>>()?;
    let total = start.elapsed().as_secs_f64();

    let dir = solve_dir(cfg, p, mode);
    let fp = cfg.fingerprint();
    for (id, r, cond_time) in &results {
        io::write_raw(&sample_file(&dir, *id, "out.raw"), &r.output)?;
        io::write_pgm(&sample_file(&dir, *id, "out.pgm"), &r.output)?;
        io::write_raw(&sample_file(&dir, *id, "cond.raw"), &r.x_cond)?;
        let armijo: Vec<u8> = r.armijo_trace.iter().map(|a| *a as u8).collect();
        let record = [
            format!("sample={id}"),
            format!("partition={}", p.as_str()),
            format!("mode={}", mode.as_str()),
            format!("fingerprint={fp}"),
            format!("t_start={}", r.t_start),
            format!("steps_taken={}", r.steps_taken),
            format!("wall_time={}", r.wall_time),
            format!("cond_time={cond_time}"),
            format!("cond_loglik={}", r.cond_loglik.unwrap_or(f64::NAN)),
            format!("alpha_trace={}", join(&r.alpha_trace)),
            format!("ldc_trace={}", join(&r.ldc_trace)),
            format!("ldc_pre_trace={}", join(&r.ldc_pre_trace)),
            format!("armijo_trace={}", join(&armijo)),
        ]
        .join("\n")
            + "\n";
        io::atomic_write(&sample_file(&dir, *id, "report.txt"), record.as_bytes())?;
    }
    let n = results.len() as f64;
    let mean_steps = results.iter().map(|r| r.1.steps_taken as f64).sum::<f64>() / n;
    let mean_time = results.iter().map(|r| r.1.wall_time).sum::<f64>() / n;
    let summary = format!(
        "solve partition={} mode={} samples={} mean_steps={mean_steps:.2} mean_wall_time={mean_time:.4}s total_time={total:.3}s",
        p.as_str(),
        mode.as_str(),
        results.len()
    );
    io::atomic_write(&dir.join("summary.txt"), (summary.clone() + "\n").as_bytes())?;
    Ok(vec![summary])
}

/// A parsed per-sample solve record.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub fingerprint: String,
    pub steps_taken: usize,
    pub t_start: usize,
    pub wall_time: f64,
    pub cond_time: f64,
}

pub fn read_record(path: &Path) -> CliResult<Record> {
    let text = io::read_text(path)?;
    let get = |k: &str| {
        text.lines()
            .find_map(|l| l.strip_prefix(k).and_then(|r| r.strip_prefix('=')))
            .map(str::to_string)
            .ok_or_else(|| Error::Format {
                path: path.display().to_string(),
                reason: format!("missing `{k}`"),
            })
    };
    let num = |k: &str| -> CliResult<f64> {
        get(k)?.parse().map_err(|_| {
            CliError::Lib(Error::Format {
                path: path.display().to_string(),
                reason: format!("bad `{k}`"),
            })
        })
    };
    Ok(Record {
        fingerprint: get("fingerprint")?,
        steps_taken: num("steps_taken")? as usize,
        t_start: num("t_start")? as usize,
        wall_time: num("wall_time")?,
        cond_time: num("cond_time")?,
    })
}

/// Metric row of one method on one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub sample: usize,
    pub method: String,
    pub psnr: f64,
    pub ssim: f64,
    pub intrinsic: f64,
    pub extrinsic: f64,
    pub rve: Vec<f64>,
    pub steps: usize,
    pub time: f64,
}

pub const CSV_HEADER: &str = "sample,method,partition,psnr,ssim,intrinsic,extrinsic,rve_per_class,steps,time";

/// Computes one CSV row for a reconstruction.
#[allow(clippy::too_many_arguments)]
pub fn metric_row(
    cfg: &RunConfig,
    d: &DegradationConfig,
    sample: &StoredSample,
    method: &str,
    x_hat: &Image,
    steps: usize,
    time: f64,
) -> CliResult<Row> {
    let spec = cfg.phantom()?;
    let h = hallucination_decompose(x_hat, &sample.x_true, d, cfg.pinv_eps()?)?;
    let rve = (0..spec.n_classes() as u8)
        .map(|c| region_volume_error(x_hat, &sample.labels, c, spec.class_bands[c as usize]))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Row {
        sample: sample.id,
        method: method.to_string(),
        psnr: psnr(x_hat, &sample.x_true, 1.0)?,
        ssim: ssim_aggregate(x_hat, &sample.x_true, &cfg.weights()?)?,
        intrinsic: h.intrinsic,
        extrinsic: h.extrinsic,
        rve,
        steps,
        time,
    })
}

pub fn format_row(row: &Row, p: Partition) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{:.6}",
        row.sample,
        row.method,
        p.as_str(),
        row.psnr,
        row.ssim,
        row.intrinsic,
        row.extrinsic,
        join(&row.rve),
        row.steps,
        row.time
    )
}

/// Side-by-side panels of equal size.
pub fn montage(panels: &[&Image]) -> crate::Result<Image> {
    let (w, h) = panels.first().ok_or(Error::Empty("montage panels"))?.dims();
    if let Some(bad) = panels.iter().find(|p| p.dims() != (w, h)) {
        return Err(Error::DimensionMismatch {
            expected: (w, h),
            actual: bad.dims(),
        });
    }
    Ok(Image::from_fn(w * panels.len(), h, |x, y| panels[x / w].get(x % w, y)))
}

pub fn evaluate(cfg: &RunConfig, p: Partition) -> CliResult<Vec<String>> {
    let samples = load_split(cfg, p, Split::Test)?;
    let d = cfg.degradation(p)?;
    let fp = cfg.fingerprint();
    let modes: Vec<Mode> = [Mode::Dynamic, Mode::Vanilla]
        .into_iter()
        .filter(|m| solve_dir(cfg, p, *m).join("summary.txt").exists())
        .collect();
    if modes.is_empty() {
        return Err(Error::MissingArtifact(format!("solve outputs for partition {}", p.as_str())).into());
    }

    let per_sample: Vec<Vec<Row>> = samples
        .par_iter()
        .map(|s| -> CliResult<Vec<Row>> {
            let mut rows = Vec::new();
            let mut refined = None;
            let mut cond = None;
            for &m in &modes {
                let dir = solve_dir(cfg, p, m);
                let rec = read_record(&sample_file(&dir, s.id, "report.txt"))?;
                if rec.fingerprint != fp {
                    return Err(Error::FingerprintMismatch {
                        expected: fp.clone(),
                        found: rec.fingerprint,
                    }
                    .into());
                }
                let out = io::read_raw(&sample_file(&dir, s.id, "out.raw"))?;
                if cond.is_none() {
                    let c = io::read_raw(&sample_file(&dir, s.id, "cond.raw"))?;
                    rows.push(metric_row(cfg, &d, s, "conditional", &c, 0, rec.cond_time)?);
                    cond = Some(c);
                }
                rows.push(metric_row(cfg, &d, s, m.as_str(), &out, rec.steps_taken, rec.wall_time)?);
                refined.get_or_insert(out);
            }
            let (w, h) = s.x_true.dims();
            let y_up = bilinear_resize(&s.y, w, h);
            let panels = montage(&[&y_up, cond.as_ref().unwrap(), refined.as_ref().unwrap(), &s.x_true])?;
            io::write_pgm(&montage_path(cfg, p, s.id), &panels)?;
            Ok(rows)
        })
        .collect::<CliResult<_>>()?;

    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    let mut n_rows = 0;
    for rows in &per_sample {
        for r in rows {
            csv.push_str(&format_row(r, p));
            csv.push('\n');
            n_rows += 1;
        }
    }
    let path = csv_path(cfg, p);
    io::atomic_write(&path, csv.as_bytes())?;

    let mut out = vec![format!(
        "evaluate partition={} samples={} rows={n_rows} csv={}",
        p.as_str(),
        samples.len(),
        path.display()
    )];
    let methods: Vec<String> = per_sample[0].iter().map(|r| r.method.clone()).collect();
    for (i, m) in methods.iter().enumerate() {
        let col = |f: &dyn Fn(&Row) -> f64| -> f64 {
            per_sample.iter().map(|rows| f(&rows[i])).sum::<f64>() / per_sample.len() as f64
        };
        out.push(format!(
            "  {m:<11} psnr={:.3} ssim={:.4} intrinsic={:.4} extrinsic={:.4} steps={:.1} time={:.4}s",
            col(&|r| r.psnr),
            col(&|r| r.ssim),
            col(&|r| r.intrinsic),
            col(&|r| r.extrinsic),
            col(&|r| r.steps as f64),
            col(&|r| r.time),
        ));
    }
    Ok(out)
}
