use std::fs;
use std::path::{Path, PathBuf};

use advmetric_core::analysis::{brightness_delta_curve, edge_mask, power_spectrum_1d, spectral_slope, SpectrumCurve};
use advmetric_core::attack::{
    epsilon_for_psnr, fit_power_law, pgd_attack, sweep_epsilon, AttackConfig, NormBall, NormKind, StepRule,
};
use advmetric_core::baseline::{baseline_sweep, sweep_csv};
use advmetric_core::image::{load_dataset, read_pnm, write_pgm};
use advmetric_core::metrics::gradcheck::{gradcheck_size, natural_crop_pair, objective_gradcheck};
use advmetric_core::metrics::{extract_features, fused_score, mse, psnr, FusionModel};
use advmetric_core::restore::{init_noise, pearson, restore, CompressionProxy, RestoreConfig};
use advmetric_core::synth::{natural_scene, SceneParams};
use advmetric_core::{Dataset, Error, ImagePlane};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::args::*;
use crate::svg::{line_plot, Plot};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("{0}")]
    Gate(String),
}

impl RunError {
    /// 0 ok, 2 I/O, 3 shape/format, 4 usage/config, 5 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Core(e) => match e {
                Error::Io { .. } => 2,
                Error::Parse { .. }
                | Error::DimensionMismatch(..)
                | Error::TooSmall(_)
                | Error::InvalidPlane(_)
                | Error::ModelFormat(_) => 3,
                Error::Config(_) | Error::EmptyDataset(_) => 4,
                Error::Numeric(_) | Error::Graph(_) => 5,
            },
            RunError::Write { .. } => 2,
            RunError::Manifest { .. } => 3,
            RunError::Usage(_) => 4,
            RunError::Gate(_) => 5,
        }
    }
}

type Result<T> = std::result::Result<T, RunError>;

/// Everything needed to reproduce a run, plus its headline numbers.
#[derive(Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub common: Common,
    pub command: Command,
    pub results: Value,
}

pub fn execute(mut common: Common, command: Command) -> Result<()> {
    let command = match command {
        Command::Rerun(args) => {
            let manifest = read_manifest(&args.manifest)?;
            if common.out.is_none() {
                common.out = manifest.common.out.clone();
            }
            common = Common {
                out: common.out,
                ..manifest.common
            };
            manifest.command
        }
        other => other,
    };
    let (common, command) = resolve(common, command)?;

    if let Some(n) = common.jobs {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let out = common.out_dir();
    fs::create_dir_all(&out).map_err(|source| RunError::Write {
        path: out.clone(),
        source,
    })?;
    let model = match &common.model {
        Some(p) => FusionModel::parse(&read_text(p)?)?,
        None => FusionModel::default(),
    };
    let ctx = Ctx {
        out: &out,
        common: &common,
        model: &model,
    };

    let outcome = match &command {
        Command::Score(a) => cmd_score(&ctx, a),
        Command::Attack(a) => cmd_attack(&ctx, a),
        Command::Restore(a) => cmd_restore(&ctx, a),
        Command::Spectrum(a) => cmd_spectrum(&ctx, a),
        Command::Curve(a) => cmd_curve(&ctx, a),
        Command::Sweep(a) => cmd_sweep(&ctx, a),
        Command::Baseline(a) => cmd_baseline(&ctx, a),
        Command::Gradcheck(a) => cmd_gradcheck(&ctx, a),
        Command::Synth(a) => cmd_synth(&ctx, a),
        Command::Rerun(_) => unreachable!("rerun is unwrapped above"),
    }?;

    let manifest = Manifest {
        tool: "advmetric".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        common: common.clone(),
        command,
        results: outcome.results,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    ctx.write(MANIFEST, format!("{text}\n").as_bytes())?;
    match outcome.gate_failure {
        Some(msg) => Err(RunError::Gate(msg)),
        None => Ok(()),
    }
}

struct Outcome {
    results: Value,
    gate_failure: Option<String>,
}

impl From<Value> for Outcome {
    fn from(results: Value) -> Self {
        Outcome {
            results,
            gate_failure: None,
        }
    }
}

struct Ctx<'a> {
    out: &'a Path,
    common: &'a Common,
    model: &'a FusionModel,
}

impl Ctx<'_> {
    fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, bytes).map_err(|source| RunError::Write { path, source })
    }

    fn plot(&self, name: &str, plot: Plot, points: &[(f64, f64)]) -> Result<()> {
        if self.common.svg {
            self.write(name, line_plot(&plot, points).as_bytes())?;
        }
        Ok(())
    }
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    serde_json::from_str(&read_text(path)?).map_err(|e| RunError::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

fn absolute(path: &Path) -> Result<PathBuf> {
    fs::canonicalize(path).map_err(|source| {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

fn absolute_opt(path: &mut Option<PathBuf>) -> Result<()> {
    if let Some(p) = path {
        *p = absolute(p)?;
    }
    Ok(())
}

/// Makes every path absolute so the manifest replays from any directory.
fn resolve(mut common: Common, mut command: Command) -> Result<(Common, Command)> {
    let out = common.out_dir();
    common.out = Some(std::path::absolute(&out).map_err(|source| RunError::Write { path: out, source })?);
    absolute_opt(&mut common.model)?;
    match &mut command {
        Command::Score(a) => {
            a.reference = absolute(&a.reference)?;
            a.dist = absolute(&a.dist)?;
        }
        Command::Attack(AttackArgs { source, .. })
        | Command::Spectrum(SpectrumArgs { source, .. })
        | Command::Sweep(SweepArgs { source, .. })
        | Command::Baseline(BaselineArgs { source, .. }) => {
            absolute_opt(&mut source.reference)?;
            absolute_opt(&mut source.dataset)?;
        }
        Command::Restore(a) => {
            a.reference = absolute(&a.reference)?;
            if !matches!(a.init.as_str(), "noise" | "proxy") {
                a.init = absolute(Path::new(&a.init))?.to_string_lossy().into_owned();
            }
        }
        Command::Curve(a) => {
            a.reference = absolute(&a.reference)?;
            absolute_opt(&mut a.dist)?;
        }
        Command::Gradcheck(_) | Command::Synth(_) | Command::Rerun(_) => {}
    }
    Ok((common, command))
}

fn load_image(path: &Path) -> Result<ImagePlane> {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(read_pnm(&bytes)?.into_luma()?)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

fn load_source(source: &Source) -> Result<Dataset> {
    match (&source.reference, &source.dataset) {
        (Some(r), None) => Ok(Dataset::new(vec![(stem(r), load_image(r)?)])?),
        (None, Some(d)) => {
            let data = load_dataset(d, &source.pattern)?;
            if data.is_empty() {
                return Err(Error::EmptyDataset(format!("{}/{}", d.display(), source.pattern)).into());
            }
            Ok(data)
        }
        _ => Err(RunError::Usage("give exactly one of --ref or --dataset".into())),
    }
}

/// JSON has no infinities; a lossless identity pair reports `"inf"`.
fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(v.to_string())
    }
}

fn attack_config(k: &PgdKnobs, seed: u64) -> AttackConfig {
    AttackConfig {
        alpha: k.alpha,
        steps: k.steps,
        box_constrain: !k.no_box,
        step_rule: StepRule::Normalized,
        random_start: k.random_start,
        seed,
    }
}

fn add(r: &ImagePlane, delta: &ImagePlane) -> Result<ImagePlane> {
    Ok(r.zip_map(delta, |a, b| a + b)?)
}

// ---------------------------------------------------------------- commands

fn cmd_score(ctx: &Ctx, a: &ScoreArgs) -> Result<Outcome> {
    let r = load_image(&a.reference)?;
    let d = load_image(&a.dist)?;
    let f = extract_features(&r, &d)?;
    let unclipped = fused_score(
        &f,
        &FusionModel {
            clip_enabled: false,
            ..ctx.model.clone()
        },
    );
    let report = json!({
        "features": {
            "vif0": f.vif[0], "vif1": f.vif[1], "vif2": f.vif[2], "vif3": f.vif[3],
            "adm": f.adm, "motion": f.motion,
        },
        "fused_unclipped": unclipped,
        "fused_clipped": unclipped.clamp(0.0, 100.0),
        "psnr": num(psnr(&r, &d)?),
    });
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{text}");
    ctx.write("score.json", format!("{text}\n").as_bytes())?;
    Ok(report.into())
}

fn cmd_attack(ctx: &Ctx, a: &AttackArgs) -> Result<Outcome> {
    let ball = |r: &ImagePlane| -> Result<NormBall> {
        match (a.epsilon, a.target_psnr) {
            (Some(eps), None) => Ok(NormBall::new(a.norm, eps)?),
            (None, Some(t)) => {
                if a.norm != NormKind::L2 {
                    return Err(RunError::Usage(
                        "--target-psnr bounds an l2 ball; pass --norm l2".into(),
                    ));
                }
                if !(t.is_finite() && t > 0.0) {
                    return Err(Error::Config(format!("target PSNR must be positive, got {t}")).into());
                }
                Ok(NormBall::new(NormKind::L2, epsilon_for_psnr(t, r.width(), r.height()))?)
            }
            _ => Err(RunError::Usage("give exactly one of --epsilon or --target-psnr".into())),
        }
    };
    let data = load_source(&a.source)?;
    let runs = data
        .entries()
        .par_iter()
        .enumerate()
        .map(|(i, (id, r))| {
            let b = ball(r)?;
            let cfg = attack_config(&a.pgd, ctx.common.seed.wrapping_add(i as u64));
            let (delta, report) = pgd_attack(r, ctx.model, &b, &cfg)?;
            Ok((id, r, b, delta, report))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut csv = String::from("id,epsilon,score_before,score_after,gain,psnr_after,final_norm\n");
    for (id, r, b, delta, rep) in &runs {
        csv.push_str(&format!(
            "{id},{},{},{},{},{},{}\n",
            b.epsilon, rep.score_before, rep.score_after, rep.gain, rep.psnr_after, rep.final_norm
        ));
        ctx.write(&format!("{id}_perturbed.pgm"), &write_pgm(&add(r, delta)?))?;
        ctx.write(&format!("{id}_delta.pgm"), &write_pgm(&delta.map(|v| v + 127.5)?))?;
        let mut trace = String::from("step,score\n");
        for (s, v) in rep.score_trace.iter().enumerate() {
            trace.push_str(&format!("{},{v}\n", s + 1));
        }
        ctx.write(&format!("trace_{id}.csv"), trace.as_bytes())?;
        let pts: Vec<_> = rep
            .score_trace
            .iter()
            .enumerate()
            .map(|(s, v)| ((s + 1) as f64, *v))
            .collect();
        let title = format!("PGD {} eps={} on {id}", b.kind, b.epsilon);
        ctx.plot(
            &format!("trace_{id}.svg"),
            Plot {
                title: &title,
                x_label: "step",
                y_label: "fused score",
                log_x: false,
                log_y: false,
            },
            &pts,
        )?;
    }
    ctx.write("attack.csv", csv.as_bytes())?;
    let n = runs.len() as f64;
    Ok(json!({
        "n_images": runs.len(),
        "mean_gain": runs.iter().map(|r| r.4.gain).sum::<f64>() / n,
        "min_psnr_after": runs.iter().map(|r| r.4.psnr_after).fold(f64::INFINITY, f64::min),
    })
    .into())
}

fn cmd_restore(ctx: &Ctx, a: &RestoreArgs) -> Result<Outcome> {
    let r = load_image(&a.reference)?;
    let (w, h) = r.dims();
    let proxy = CompressionProxy {
        blur_sigma: a.proxy_sigma,
        levels: a.proxy_levels,
    };
    let init = match a.init.as_str() {
        "noise" => init_noise(w, h, ctx.common.seed),
        "proxy" => proxy.apply(&r)?,
        path => load_image(Path::new(path))?,
    };
    let mut cfg = RestoreConfig::new(a.target);
    cfg.lr = a.lr;
    cfg.stop_mode = a.stop_mode;
    cfg.threshold = a.threshold.unwrap_or(cfg.threshold);
    cfg.conv_tol = a.conv_tol;
    cfg.conv_window = a.conv_window;
    cfg.max_steps = a.max_steps;
    cfg.seed = ctx.common.seed;

    let (img, trace) = restore(&r, &init, &cfg, ctx.model)?;
    ctx.write("init.pgm", &write_pgm(&init))?;
    ctx.write("restored.pgm", &write_pgm(&img))?;
    ctx.write("trace.csv", trace.to_csv().as_bytes())?;
    let pts: Vec<_> = trace.points.iter().map(|p| (p.step as f64, p.score)).collect();
    let title = format!("{} restoration", a.target);
    ctx.plot(
        "trace.svg",
        Plot {
            title: &title,
            x_label: "step",
            y_label: "score",
            log_x: false,
            log_y: false,
        },
        &pts,
    )?;
    Ok(json!({
        "final_score": trace.final_score(),
        "steps": trace.points.len(),
        "reached_threshold": trace.reached_threshold,
        "hit_max_steps": trace.hit_max_steps,
        "mse": mse(&r, &img)?,
        "pearson": pearson(&r, &img)?,
    })
    .into())
}

fn cmd_spectrum(ctx: &Ctx, a: &SpectrumArgs) -> Result<Outcome> {
    let data = load_source(&a.source)?;
    let curves = data
        .entries()
        .par_iter()
        .enumerate()
        .map(|(i, (_, img))| {
            Ok(power_spectrum_1d(
                img,
                a.patches,
                a.patch,
                ctx.common.seed.wrapping_add(i as u64),
            )?)
        })
        .collect::<Result<Vec<SpectrumCurve>>>()?;
    let n = curves[0].patch_size;
    if curves.iter().any(|c| c.patch_size != n) {
        return Err(Error::Config("images of different sizes fell back to different patch sizes".into()).into());
    }
    let mut mean = curves[0].clone();
    for c in &curves[1..] {
        mean.power.iter_mut().zip(&c.power).for_each(|(m, p)| *m += p);
    }
    mean.power.iter_mut().for_each(|m| *m /= curves.len() as f64);
    mean.n_patches = a.patches * curves.len();

    let (lo, hi) = match a.band.as_deref() {
        Some([lo, hi]) => (*lo, *hi),
        _ => (2, n / 4),
    };
    let slope = spectral_slope(&mean, (lo as f64 / n as f64, hi as f64 / n as f64))?;
    ctx.write("spectrum.csv", mean.to_csv().as_bytes())?;
    let pts: Vec<_> = mean.freq.iter().cloned().zip(mean.power.iter().cloned()).collect();
    ctx.plot(
        "spectrum.svg",
        Plot {
            title: "radially averaged power spectrum",
            x_label: "cycles/pixel",
            y_label: "power",
            log_x: true,
            log_y: true,
        },
        &pts,
    )?;
    Ok(json!({ "slope": slope, "band_bins": [lo, hi], "patch_size": n, "n_images": curves.len() }).into())
}

fn cmd_curve(ctx: &Ctx, a: &CurveArgs) -> Result<Outcome> {
    let r = load_image(&a.reference)?;
    let delta = match (&a.dist, a.target_psnr) {
        (Some(d), None) => r.zip_map(&load_image(d)?, |x, y| y - x)?,
        (None, Some(t)) => {
            let eps = epsilon_for_psnr(t, r.width(), r.height());
            let ball = NormBall::new(NormKind::L2, eps)?;
            let (delta, _) = pgd_attack(&r, ctx.model, &ball, &attack_config(&a.pgd, ctx.common.seed))?;
            ctx.write("perturbed.pgm", &write_pgm(&add(&r, &delta)?))?;
            delta
        }
        _ => return Err(RunError::Usage("give exactly one of --dist or --target-psnr".into())),
    };
    let mask = if a.no_mask {
        None
    } else {
        Some(edge_mask(&r, a.edge_k)?)
    };
    let curve = brightness_delta_curve(&r, &delta, mask.as_ref())?;
    ctx.write("curve.csv", curve.to_csv().as_bytes())?;
    let pts: Vec<_> = curve
        .intensity
        .iter()
        .zip(&curve.mean_abs_delta)
        .filter_map(|(i, m)| m.map(|m| (*i as f64, m)))
        .collect();
    ctx.plot(
        "curve.svg",
        Plot {
            title: "perturbation vs brightness",
            x_label: "reference intensity",
            y_label: "mean |delta|",
            log_x: false,
            log_y: false,
        },
        &pts,
    )?;
    Ok(json!({
        "mean_abs_slope": curve.mean_abs_slope()?,
        "pixels": curve.total(),
        "psnr": num(psnr(&r, &add(&r, &delta)?)?),
    })
    .into())
}

fn cmd_sweep(ctx: &Ctx, a: &SweepArgs) -> Result<Outcome> {
    let data = load_source(&a.source)?;
    let cfg = attack_config(&a.pgd, ctx.common.seed);
    let table = sweep_epsilon(&data, ctx.model, a.norm, &a.eps, &cfg)?;
    ctx.write("gains.csv", table.to_csv().as_bytes())?;
    ctx.write("records.csv", table.records_csv().as_bytes())?;
    let pts = table.points();
    ctx.plot(
        "gains.svg",
        Plot {
            title: "mean gain vs radius",
            x_label: "epsilon",
            y_label: "mean gain",
            log_x: true,
            log_y: true,
        },
        &pts,
    )?;
    let fit = match fit_power_law(&pts) {
        Ok(f) => serde_json::to_value(f).expect("fit serializes"),
        Err(e) => json!({ "error": e.to_string() }),
    };
    Ok(json!({ "rows": table.rows.len(), "fit": fit }).into())
}

fn cmd_baseline(ctx: &Ctx, a: &BaselineArgs) -> Result<Outcome> {
    let data = load_source(&a.source)?;
    let window = match a.psnr_window.as_deref() {
        Some([lo, hi]) => Some((*lo, *hi)),
        _ => None,
    };
    let rows = baseline_sweep(&data, ctx.model, a.method, &a.grid, window)?;
    ctx.write("baseline.csv", sweep_csv(&rows).as_bytes())?;
    let pts: Vec<_> = rows.iter().map(|r| (r.mean_psnr, r.mean_gain)).collect();
    let title = format!("{} gain vs PSNR", a.method);
    ctx.plot(
        "baseline.svg",
        Plot {
            title: &title,
            x_label: "PSNR dB",
            y_label: "mean gain",
            log_x: false,
            log_y: false,
        },
        &pts,
    )?;
    Ok(json!({
        "rows": rows.len(),
        "in_window": rows.iter().filter(|r| r.in_window).map(|r| r.param).collect::<Vec<_>>(),
    })
    .into())
}

fn cmd_gradcheck(ctx: &Ctx, a: &GradcheckArgs) -> Result<Outcome> {
    let jobs: Vec<_> = a
        .metrics
        .iter()
        .flat_map(|&m| (0..a.pairs).map(move |p| (m, p)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(m, p)| {
            let size = gradcheck_size(m, a.size);
            let (r, d) = natural_crop_pair(ctx.common.seed.wrapping_add(p as u64), size);
            let rep = objective_gradcheck(m, &r, &d, ctx.model, a.step)?;
            Ok((m, p, size, rep.max_rel_error))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut csv = String::from("metric,pair,size,max_rel_error,pass\n");
    let mut summary = serde_json::Map::new();
    let mut failed = Vec::new();
    println!("{:<8} {:>6} {:>14}  result", "metric", "pairs", "max_rel_error");
    for m in &a.metrics {
        let mine: Vec<_> = rows.iter().filter(|r| r.0 == *m).collect();
        for (_, p, size, err) in &mine {
            csv.push_str(&format!("{m},{p},{size},{err:e},{}\n", *err < a.tolerance));
        }
        let worst = mine.iter().map(|r| r.3).fold(0.0, f64::max);
        let pass = worst < a.tolerance;
        println!(
            "{:<8} {:>6} {:>14.3e}  {}",
            m.name(),
            mine.len(),
            worst,
            if pass { "ok" } else { "FAIL" }
        );
        if !pass {
            failed.push(m.name());
        }
        summary.insert(m.name().into(), json!({ "max_rel_error": worst, "pass": pass }));
    }
    ctx.write("gradcheck.csv", csv.as_bytes())?;
    let gate_failure =
        (!failed.is_empty()).then(|| format!("gradient check above {:e} for: {}", a.tolerance, failed.join(", ")));
    Ok(Outcome {
        results: Value::Object(summary),
        gate_failure,
    })
}

fn cmd_synth(ctx: &Ctx, a: &SynthArgs) -> Result<Outcome> {
    if a.width < 8 || a.height < 8 {
        return Err(Error::Config(format!("scene size {}x{} is too small", a.width, a.height)).into());
    }
    let names: Vec<String> = (0..a.count)
        .into_par_iter()
        .map(|i| {
            let name = format!("scene_{i:02}.pgm");
            let img = natural_scene(
                a.width,
                a.height,
                ctx.common.seed.wrapping_add(i as u64),
                &SceneParams::default(),
            );
            ctx.write(&name, &write_pgm(&img))?;
            Ok(name)
        })
        .collect::<Result<_>>()?;
    Ok(json!({ "files": names }).into())
}
