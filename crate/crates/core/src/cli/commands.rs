use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use crate::error::AidError;
use crate::metrics::{
    evaluate, DownsampleFeatures, EncoderDistance, EncoderFeatures, FeatureExtractor, MetricsReport,
    PerceptualDistance, PixelL2,
};
use crate::model::{
    content_hash, read_checkpoint, save_checkpoint, train, ConditionEmbedding, DenoiserWeights, ModelConfig,
    ShapeClass, ShapeDataset, TrainConfig,
};
use crate::numerics::SeededRng;
use crate::pipeline::{
    interpolate as run_interpolation, optimize_prior, DenoiseOrientation, Denoiser, InterpolationConfig,
    InterpolationSequence, Method,
};
use crate::scheduler::{NoiseSchedule, SamplerConfig};
use crate::selection::{beta_schedule, uniform_schedule, BetaPrior, BoConfig, BoObjective};

use super::image::render_grid;
use super::manifest::{read_archive, write_sequence_images, Archive, RunManifest, MANIFEST_FILE};
use super::{
    usage, CliError, CliResult, Command, CompareArgs, DistanceArg, EvaluateArgs, FeaturesArg, InterpolateArgs,
    ObjectiveArg, OptimizeArgs, ReplayArgs, SequenceArgs, TrainArgs,
};

pub(super) fn dispatch(cmd: Command) -> CliResult<()> {
    let start = Instant::now();
    match cmd {
        Command::Train(a) => cmd_train(&a)?,
        Command::Interpolate(a) => cmd_interpolate(&a)?,
        Command::Evaluate(a) => cmd_evaluate(&a)?,
        Command::OptimizeBeta(a) => cmd_optimize_beta(&a)?,
        Command::Compare(a) => cmd_compare(&a)?,
        Command::Replay(a) => cmd_replay(&a)?,
    }
    eprintln!("elapsed {:.2}s", start.elapsed().as_secs_f64());
    Ok(())
}

/// Worker count from `AIDKIT_THREADS` (default 1).
pub fn worker_threads() -> CliResult<usize> {
    match std::env::var("AIDKIT_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => usage(format!("AIDKIT_THREADS must be a positive integer, got '{v}'")),
        },
    }
}

/// A class name, or `a+b` for the mean of two class embeddings.
pub fn parse_guidance(spec: &str, w: &DenoiserWeights) -> CliResult<ConditionEmbedding> {
    let classes = spec
        .split('+')
        .map(|s| s.trim().parse::<ShapeClass>().map(ShapeClass::id))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Usage(format!("--guidance: {e}")))?;
    Ok(match classes.as_slice() {
        [c] => w.class_condition(*c)?,
        cs => w.mean_condition(cs)?,
    })
}

fn load_checkpoint(path: &Path) -> CliResult<(DenoiserWeights, String)> {
    let bytes = fs::read(path).map_err(|e| {
        CliError::Runtime(AidError::Io(std::io::Error::new(
            e.kind(),
            format!("cannot read checkpoint {}: {e}", path.display()),
        )))
    })?;
    let w = read_checkpoint(&mut bytes.as_slice())?;
    Ok((w, content_hash(&bytes)))
}

fn noise_schedule(w: &DenoiserWeights) -> CliResult<NoiseSchedule> {
    Ok(NoiseSchedule::linear(w.config.train_steps, 1e-4, 0.02)?)
}

fn sampler(steps: usize, sched: &NoiseSchedule) -> CliResult<SamplerConfig> {
    let s = SamplerConfig::new(steps);
    if let Err(e) = s.validate(sched) {
        return usage(format!("--steps: {e}"));
    }
    Ok(s)
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned())
}

fn distance_for<'a>(arg: DistanceArg, w: &'a DenoiserWeights) -> Box<dyn PerceptualDistance + Sync + 'a> {
    match arg {
        DistanceArg::Pixel => Box::new(PixelL2),
        DistanceArg::Encoder => Box::new(EncoderDistance::new(w)),
    }
}

fn features_for<'a>(arg: FeaturesArg, w: &'a DenoiserWeights) -> Box<dyn FeatureExtractor + Sync + 'a> {
    match arg {
        FeaturesArg::Encoder => Box::new(EncoderFeatures { weights: w }),
        FeaturesArg::Downsample => Box::new(DownsampleFeatures),
    }
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    if !(a.lr.is_finite() && a.lr > 0.0) {
        return usage(format!("--lr must be positive, got {}", a.lr));
    }
    if a.batch == 0 || a.per_class == 0 {
        return usage("--batch and --per-class must be positive");
    }
    let data = ShapeDataset::generate(a.per_class, a.seed)?;
    let cfg = TrainConfig {
        steps: a.steps,
        lr: a.lr,
        batch: a.batch,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let model = ModelConfig::default();
    let sched = NoiseSchedule::linear(model.train_steps, 1e-4, 0.02)?;
    let out = train(&data, &cfg, model, &sched)?;
    let bytes = save_checkpoint(&out.weights, &a.out)?;

    let mut m = RunManifest::new("train", a)?;
    m.seeds.insert("seed".into(), a.seed);
    m.checkpoint_hash = Some(content_hash(&bytes));
    m.outputs.push(file_name(&a.out));
    m.result = json!({
        "dataset_images": data.len(),
        "heldout_samples": cfg.heldout,
        "initial_heldout_loss": out.initial_heldout_loss,
        "final_heldout_loss": out.final_heldout_loss,
    });
    m.write(&train_manifest_path(&a.out))?;
    println!(
        "held-out loss: initial {:.6} final {:.6} (ratio {:.4})",
        out.initial_heldout_loss,
        out.final_heldout_loss,
        out.final_heldout_loss / out.initial_heldout_loss
    );
    println!("checkpoint {} {}", a.out.display(), content_hash(&bytes));
    Ok(())
}

/// `<checkpoint>.manifest.json`.
pub fn train_manifest_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

struct SequenceSetup {
    cfg: InterpolationConfig,
    c1: ConditionEmbedding,
    cm: ConditionEmbedding,
}

fn sequence_setup(a: &SequenceArgs, w: &DenoiserWeights, steps: usize) -> CliResult<SequenceSetup> {
    if a.m < 2 {
        return usage(format!("--m must be at least 2, got {}", a.m));
    }
    if !a.mode.is_aid() {
        for (set, flag) in [
            (a.guidance.is_some(), "--guidance"),
            (a.fused.is_some(), "--fused"),
            (a.warmup.is_some(), "--warmup"),
        ] {
            if set {
                return usage(format!("{flag} only applies to --mode aid-i or aid-o"));
            }
        }
    }
    if a.flip_denoise && a.mode != Method::Denoise {
        return usage("--flip-denoise only applies to --mode denoise");
    }
    let mut cfg = InterpolationConfig::new(a.mode, a.m)?;
    if let Some(f) = a.fused {
        cfg.fused = f;
    }
    cfg.guidance = a.guidance.as_deref().map(|g| parse_guidance(g, w)).transpose()?;
    cfg.warmup_steps = a.warmup;
    cfg.seeds = (a.seed_a, a.seed_b);
    if a.flip_denoise {
        cfg.denoise_orientation = DenoiseOrientation::LastSource;
    }
    if let Err(e) = cfg.validate(steps) {
        return usage(e.to_string());
    }
    Ok(SequenceSetup {
        cfg,
        c1: w.class_condition(a.class_a.id())?,
        cm: w.class_condition(a.class_b.id())?,
    })
}

fn prior(alpha: f64, beta: f64) -> CliResult<BetaPrior> {
    BetaPrior::new(alpha, beta).map_err(|e| CliError::Usage(format!("--alpha/--beta: {e}")))
}

fn cmd_interpolate(a: &InterpolateArgs) -> CliResult<()> {
    let s = &a.sequence;
    let p = prior(a.alpha, a.beta)?;
    let (w, hash) = load_checkpoint(&s.checkpoint)?;
    let sched = noise_schedule(&w)?;
    let sampler = sampler(s.steps, &sched)?;
    let mut setup = sequence_setup(s, &w, s.steps)?;
    setup.cfg.schedule = beta_schedule(s.m, &p)?;
    let model = Denoiser {
        weights: &w,
        schedule: &sched,
        sampler: &sampler,
    };
    let seq = run_interpolation(&setup.cfg, &setup.c1, &setup.cm, &model)?;
    let record = write_sequence_images(&seq, &a.out)?;

    let mut m = RunManifest::new("interpolate", a)?;
    m.seeds.insert("seed_a".into(), s.seed_a);
    m.seeds.insert("seed_b".into(), s.seed_b);
    m.checkpoint_hash = Some(hash);
    m.outputs = record.images.clone();
    m.outputs.push(record.strip.clone());
    m.result = serde_json::to_value(&record)?;
    m.write(&a.out.join(MANIFEST_FILE))?;
    println!(
        "{} images ({}) -> {}",
        seq.images.len(),
        seq.method,
        a.out.display()
    );
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let archives = a
        .archives
        .iter()
        .map(|d| read_archive(d))
        .collect::<Result<Vec<Archive>, _>>()?;
    let needs_model = a.distance == DistanceArg::Encoder || a.features == FeaturesArg::Encoder;
    let loaded = if needs_model {
        let path = match &a.checkpoint {
            Some(p) => p.clone(),
            None => match archives[0].manifest.config.get("checkpoint").and_then(|v| v.as_str()) {
                Some(p) => PathBuf::from(p),
                None => return usage("encoder metrics need --checkpoint"),
            },
        };
        Some(load_checkpoint(&path)?)
    } else {
        None
    };
    let fallback = DenoiserWeights::zeros(ModelConfig::default());
    let w = loaded.as_ref().map_or(&fallback, |(w, _)| w);
    let report = evaluate(
        &archives,
        distance_for(a.distance, w).as_ref(),
        features_for(a.features, w).as_ref(),
    )?;

    let json_bytes = {
        let mut b = serde_json::to_vec_pretty(&report)?;
        b.push(b'\n');
        b
    };
    crate::io::write_atomic(&a.out.join("report.json"), &json_bytes)?;
    let csv = format!("{}\n{}\n", MetricsReport::CSV_HEADER, report.csv_row());
    crate::io::write_atomic(&a.out.join("report.csv"), csv.as_bytes())?;

    let mut m = RunManifest::new("evaluate", a)?;
    m.checkpoint_hash = loaded.map(|(_, h)| h);
    m.outputs = vec!["report.json".into(), "report.csv".into()];
    m.result = serde_json::to_value(&report)?;
    m.write(&a.out.join(MANIFEST_FILE))?;
    print!("{}", String::from_utf8_lossy(&json_bytes));
    Ok(())
}

fn bo_objective(arg: ObjectiveArg) -> BoObjective {
    match arg {
        ObjectiveArg::Smoothness => BoObjective::Smoothness,
        ObjectiveArg::Consistency => BoObjective::Consistency,
    }
}

fn cmd_optimize_beta(a: &OptimizeArgs) -> CliResult<()> {
    let s = &a.sequence;
    let (w, hash) = load_checkpoint(&s.checkpoint)?;
    let sched = noise_schedule(&w)?;
    let sampler = sampler(s.steps, &sched)?;
    let setup = sequence_setup(s, &w, s.steps)?;
    let model = Denoiser {
        weights: &w,
        schedule: &sched,
        sampler: &sampler,
    };
    let bo = BoConfig {
        iterations: a.iterations,
        objective: bo_objective(a.objective),
        seed: a.bo_seed,
        ..BoConfig::for_steps(s.steps)
    };
    let p = distance_for(a.distance, &w);
    let result = optimize_prior(&setup.cfg, &setup.c1, &setup.cm, &model, p.as_ref(), &bo)?;
    crate::io::write_atomic(&a.out.join("trace.csv"), result.trace_csv().as_bytes())?;

    let mut m = RunManifest::new("optimize-beta", a)?;
    m.seeds.insert("seed_a".into(), s.seed_a);
    m.seeds.insert("seed_b".into(), s.seed_b);
    m.seeds.insert("bo_seed".into(), a.bo_seed);
    m.checkpoint_hash = Some(hash);
    m.outputs = vec!["trace.csv".into()];
    m.result = json!({
        "alpha": result.alpha,
        "beta": result.beta,
        "best_value": result.best_value,
        "evaluations": result.trace.len(),
        "init_points": bo.init_points,
    });
    m.write(&a.out.join(MANIFEST_FILE))?;
    println!(
        "alpha* = {} beta* = {} objective = {} ({} evaluations)",
        result.alpha,
        result.beta,
        result.best_value,
        result.trace.len()
    );
    Ok(())
}

/// One seeded class pair of a comparison run.
#[derive(Debug, Clone, Copy)]
struct PairPlan {
    class_a: usize,
    class_b: usize,
    seed_a: u64,
    seed_b: u64,
    bo_seed: u64,
}

fn plan_pairs(n: usize, master: u64, classes: usize) -> Vec<PairPlan> {
    let mut rng = SeededRng::new(master);
    (0..n)
        .map(|_| {
            let class_a = rng.below(classes);
            let mut class_b = rng.below(classes - 1);
            if class_b >= class_a {
                class_b += 1;
            }
            PairPlan {
                class_a,
                class_b,
                seed_a: rng.next_u64() >> 32,
                seed_b: rng.next_u64() >> 32,
                bo_seed: rng.next_u64() >> 32,
            }
        })
        .collect()
}

struct PairOutcome {
    sequences: Vec<InterpolationSequence>,
    /// Optimized (alpha, beta) per method; `None` for the uniform baselines.
    priors: Vec<Option<(f64, f64)>>,
}

fn run_pair(
    plan: PairPlan,
    a: &CompareArgs,
    model: &Denoiser<'_>,
    p: &dyn PerceptualDistance,
) -> crate::Result<PairOutcome> {
    let w = model.weights;
    let c1 = w.class_condition(plan.class_a)?;
    let cm = w.class_condition(plan.class_b)?;
    let mut sequences = Vec::with_capacity(Method::ALL.len());
    let mut priors = Vec::with_capacity(Method::ALL.len());
    for method in Method::ALL {
        let mut cfg = InterpolationConfig::new(method, a.m)?;
        cfg.seeds = (plan.seed_a, plan.seed_b);
        let mut chosen = None;
        if method.is_aid() {
            let bo = BoConfig {
                iterations: a.iterations,
                seed: plan.bo_seed,
                ..BoConfig::for_steps(a.steps)
            };
            let r = optimize_prior(&cfg, &c1, &cm, model, p, &bo)?;
            cfg.schedule = beta_schedule(a.m, &r.prior()?)?;
            chosen = Some((r.alpha, r.beta));
        } else {
            cfg.schedule = uniform_schedule(a.m)?;
        }
        sequences.push(run_interpolation(&cfg, &c1, &cm, model)?);
        priors.push(chosen);
    }
    Ok(PairOutcome { sequences, priors })
}

/// Runs `job` for every index on `threads` workers; results keep index order.
fn parallel_map<T: Send>(
    n: usize,
    threads: usize,
    job: impl Fn(usize) -> crate::Result<T> + Sync,
) -> crate::Result<Vec<T>> {
    let threads = threads.clamp(1, n.max(1));
    let mut slots: Vec<Option<crate::Result<T>>> = (0..n).map(|_| None).collect();
    if threads == 1 {
        for (i, s) in slots.iter_mut().enumerate() {
            *s = Some(job(i));
        }
    } else {
        let job = &job;
        let results: Vec<Vec<(usize, crate::Result<T>)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|t| scope.spawn(move || (t..n).step_by(threads).map(|i| (i, job(i))).collect()))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker thread panicked"))
                .collect()
        });
        for (i, r) in results.into_iter().flatten() {
            slots[i] = Some(r);
        }
    }
    slots
        .into_iter()
        .map(|s| s.expect("every index is visited"))
        .collect()
}

pub(crate) const COMPARE_HEADER: &str = "method,fused,schedule,consistency,smoothness,fidelity,distance,features,k,m";

fn cmd_compare(a: &CompareArgs) -> CliResult<()> {
    if a.pairs == 0 {
        return usage("--pairs must be at least 1");
    }
    if a.m < 2 {
        return usage(format!("--m must be at least 2, got {}", a.m));
    }
    let threads = worker_threads()?;
    let (w, hash) = load_checkpoint(&a.checkpoint)?;
    let sched = noise_schedule(&w)?;
    let sampler = sampler(a.steps, &sched)?;
    let model = Denoiser {
        weights: &w,
        schedule: &sched,
        sampler: &sampler,
    };
    let p = distance_for(a.distance, &w);
    let fx = features_for(a.features, &w);
    let plans = plan_pairs(a.pairs, a.seed, w.config.classes);
    let outcomes = parallel_map(plans.len(), threads, |i| run_pair(plans[i], a, &model, p.as_ref()))?;

    let mut outputs = vec!["compare.csv".to_string(), "pairs.csv".to_string()];
    let mut pairs_csv = String::from("pair,class_a,class_b,seed_a,seed_b,method,alpha,beta,consistency,smoothness\n");
    for (i, (plan, o)) in plans.iter().zip(&outcomes).enumerate() {
        let rows: Vec<_> = o.sequences.iter().map(|s| s.images.clone()).collect();
        let name = format!("grids/pair_{i:03}.pgm");
        crate::io::write_atomic(&a.out.join(&name), &render_grid(&rows)?.encode_pgm())?;
        outputs.push(name);
        for (seq, prior) in o.sequences.iter().zip(&o.priors) {
            let r = evaluate(std::slice::from_ref(seq), p.as_ref(), fx.as_ref())?;
            let (al, be) = prior.map_or((String::new(), String::new()), |(x, y)| (x.to_string(), y.to_string()));
            pairs_csv.push_str(&format!(
                "{i},{},{},{},{},{},{al},{be},{},{}\n",
                ShapeClass::from_id(plan.class_a)?,
                ShapeClass::from_id(plan.class_b)?,
                plan.seed_a,
                plan.seed_b,
                seq.method,
                r.consistency,
                r.smoothness
            ));
        }
    }

    let mut csv = format!("{COMPARE_HEADER}\n");
    let mut reports = Vec::new();
    for (mi, method) in Method::ALL.into_iter().enumerate() {
        let seqs: Vec<&InterpolationSequence> = outcomes.iter().map(|o| &o.sequences[mi]).collect();
        let images: Vec<&[crate::Tensor]> = seqs.iter().map(|s| s.images.as_slice()).collect();
        let report = evaluate(&images, p.as_ref(), fx.as_ref())?;
        let schedule = if method.is_aid() { "beta_optimized" } else { "uniform" };
        csv.push_str(&format!("{method},{},{schedule},{}\n", method.is_aid(), report.csv_row()));
        reports.push((method, report));
    }
    crate::io::write_atomic(&a.out.join("compare.csv"), csv.as_bytes())?;
    crate::io::write_atomic(&a.out.join("pairs.csv"), pairs_csv.as_bytes())?;

    let consistency_of = |m: Method| reports.iter().find(|(x, _)| *x == m).map(|(_, r)| r.consistency);
    let aid_o = consistency_of(Method::AidOuter).expect("aid_outer row");
    let text = consistency_of(Method::TextEmbed).expect("text baseline row");
    let mut m = RunManifest::new("compare", a)?;
    m.seeds.insert("seed".into(), a.seed);
    m.checkpoint_hash = Some(hash);
    m.outputs = outputs;
    m.result = json!({
        "methods": reports.iter().map(|(method, r)| json!({"method": method, "report": r})).collect::<Vec<_>>(),
        "aid_outer_consistency": aid_o,
        "text_baseline_consistency": text,
        "aid_outer_consistency_le_text_baseline": aid_o <= text,
    });
    m.write(&a.out.join(MANIFEST_FILE))?;
    print!("{csv}");
    println!(
        "aid_outer consistency {aid_o:.6} {} text baseline {text:.6}",
        if aid_o <= text { "<=" } else { ">" }
    );
    Ok(())
}

fn cmd_replay(a: &ReplayArgs) -> CliResult<()> {
    let m = RunManifest::read(&a.manifest)?;
    let config = m.config.clone();
    let bad = |e: serde_json::Error| CliError::Runtime(AidError::Format(format!("manifest config: {e}")));
    if let (Some(expected), Some(path)) = (&m.checkpoint_hash, config.get("checkpoint").and_then(|v| v.as_str())) {
        if m.command != "train" {
            let (_, hash) = load_checkpoint(Path::new(path))?;
            if &hash != expected {
                return Err(CliError::Runtime(AidError::Format(format!(
                    "checkpoint {path} has hash {hash}, manifest expects {expected}"
                ))));
            }
        }
    }
    match m.command.as_str() {
        "train" => cmd_train(&serde_json::from_value(config).map_err(bad)?),
        "interpolate" => cmd_interpolate(&serde_json::from_value(config).map_err(bad)?),
        "evaluate" => cmd_evaluate(&serde_json::from_value(config).map_err(bad)?),
        "optimize-beta" => cmd_optimize_beta(&serde_json::from_value(config).map_err(bad)?),
        "compare" => cmd_compare(&serde_json::from_value(config).map_err(bad)?),
        other => Err(CliError::Runtime(AidError::Format(format!("unknown command '{other}' in manifest")))),
    }
}
