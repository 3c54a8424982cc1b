use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use promptlex::optimizer::OptimizeError;
use promptlex::template_file::replace_description;
use promptlex::{
    compute_influence, evaluate_batch, neighborhood, optimize_on_batch, replay, sample_reference,
    Objective, OptimizationTrace, OrderMode, Ratio, TaskInstance,
};

use crate::config::Loaded;
use crate::report::{render_influence, render_trace};

pub struct OptimizeArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub seeds: Option<u64>,
    pub order: Option<OrderMode>,
    pub k: Option<usize>,
    pub fraction: Option<f64>,
    pub reference_size: Option<usize>,
    pub run_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct SeedSummary {
    seed: u64,
    initial_loss: Ratio,
    final_loss: Ratio,
    accepted: usize,
    steps: usize,
    final_description: String,
    eval_accuracy_before: Option<Ratio>,
    eval_accuracy_after: Option<Ratio>,
}

#[derive(Serialize)]
struct Spread {
    mean: f64,
    stddev: f64,
}

impl Spread {
    /// Sample standard deviation; zero for a single value.
    fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let stddev = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, stddev }
    }
}

#[derive(Serialize)]
struct Summary {
    runs: Vec<SeedSummary>,
    final_loss: Spread,
    eval_accuracy: Option<Spread>,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn optimize(args: OptimizeArgs) -> Result<()> {
    let loaded = Loaded::read(&args.config)?;
    let run_dir = args.run_dir.clone().unwrap_or_else(|| loaded.run_dir());
    let (source, template) = loaded.template_source(None)?;
    let proxy = loaded.proxy_pool()?;
    let eval = match loaded.cfg.eval_pool {
        Some(_) => Some(loaded.eval_pool()?),
        None => None,
    };
    let provider = loaded.provider()?;
    let cache = loaded.cache(&run_dir)?;

    let mut params = loaded.cfg.params.clone();
    if let Some(o) = args.order {
        params.order_mode = o;
    }
    if let Some(k) = args.k {
        params.candidate_k = k;
    }
    if let Some(f) = args.fraction {
        params.target_fraction = f;
    }
    if let Some(n) = args.reference_size {
        params.reference_size = n;
    }
    params.validate()?;
    let first_seed = args.seed.unwrap_or(params.seed);
    let count = args.seeds.unwrap_or(1);
    if count == 0 {
        bail!("--seeds must be at least 1");
    }

    let mut runs = Vec::new();
    let mut stdout = std::io::stdout().lock();
    for seed in first_seed..first_seed + count {
        params.seed = seed;
        let batch = sample_reference(&proxy, params.reference_size, seed)?;
        let mut groups: Vec<&[TaskInstance]> = vec![&batch.instances];
        if let Some(e) = &eval {
            groups.push(e.instances());
        }
        let oracle = loaded.oracle(&template, proxy.verbalizer(), &groups)?;
        let dir = run_dir.join(format!("seed-{seed}"));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let trace_path = dir.join("trace.json");

        tracing::info!(seed, "optimizing");
        let outcome = match optimize_on_batch(
            oracle.as_ref(),
            provider.as_ref(),
            &template,
            &batch,
            proxy.verbalizer(),
            &params,
            &cache,
        ) {
            Ok(o) => o,
            Err(OptimizeError::Aborted { source, trace }) => {
                write_file(&trace_path, &trace.to_json())?;
                return Err(anyhow!(
                    "seed {seed}: run aborted after {} steps: {source} (partial trace in {})",
                    trace.iterations.len(),
                    trace_path.display()
                ));
            }
            Err(e) => return Err(e).context(format!("seed {seed}")),
        };
        let trace = &outcome.trace;
        write_file(&trace_path, &trace.to_json())?;
        write_file(
            &dir.join("template.toml"),
            &replace_description(&source, &trace.final_description)?,
        )?;

        let (before, after) = match &eval {
            Some(e) => {
                let b = evaluate_batch(oracle.as_ref(), &template, e.instances(), e.verbalizer(), &cache)?;
                let a = evaluate_batch(oracle.as_ref(), &outcome.template, e.instances(), e.verbalizer(), &cache)?;
                (Some(b.accuracy()), Some(a.accuracy()))
            }
            None => (None, None),
        };

        writeln!(stdout, "== seed {seed} ==")?;
        write!(stdout, "{}", render_trace(trace))?;
        if let (Some(b), Some(a), Some(e)) = (before, after, &eval) {
            writeln!(stdout, "\n{} accuracy: {b} -> {a}", e.name())?;
        }
        writeln!(stdout)?;
        runs.push(SeedSummary {
            seed,
            initial_loss: trace.initial_loss,
            final_loss: trace.final_loss,
            accepted: trace.accepted().count(),
            steps: trace.iterations.len(),
            final_description: trace.final_description.render(),
            eval_accuracy_before: before,
            eval_accuracy_after: after,
        });
    }

    let losses: Vec<f64> = runs.iter().map(|r| r.final_loss.value()).collect();
    let accs: Option<Vec<f64>> = runs
        .iter()
        .map(|r| r.eval_accuracy_after.map(|a| a.value()))
        .collect();
    let summary = Summary {
        final_loss: Spread::of(&losses),
        eval_accuracy: accs.as_deref().map(Spread::of),
        runs,
    };
    if summary.runs.len() > 1 {
        writeln!(
            stdout,
            "final proxy loss over {} seeds: mean {:.4}, stddev {:.4}",
            summary.runs.len(),
            summary.final_loss.mean,
            summary.final_loss.stddev
        )?;
        if let Some(s) = &summary.eval_accuracy {
            writeln!(stdout, "eval accuracy: mean {:.4}, stddev {:.4}", s.mean, s.stddev)?;
        }
    }
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    write_file(&run_dir.join("summary.json"), &json)
}

pub fn evaluate(config: &Path, template: Option<&Path>, proxy: bool, run_dir: Option<PathBuf>) -> Result<()> {
    let loaded = Loaded::read(config)?;
    let run_dir = run_dir.unwrap_or_else(|| loaded.run_dir());
    let (_, template) = loaded.template_source(template)?;
    let pool = if proxy { loaded.proxy_pool()? } else { loaded.eval_pool()? };
    let cache = loaded.cache(&run_dir)?;
    let oracle = loaded.oracle(&template, pool.verbalizer(), &[pool.instances()])?;
    let res = evaluate_batch(oracle.as_ref(), &template, pool.instances(), pool.verbalizer(), &cache)?;
    println!("{}: accuracy {}", pool.name(), res.accuracy());
    eprintln!("oracle calls: {}, cache hits: {}", res.oracle_calls, res.cache_hits);
    Ok(())
}

pub fn influence(config: &Path, template: Option<&Path>, seed: Option<u64>, run_dir: Option<PathBuf>) -> Result<()> {
    let loaded = Loaded::read(config)?;
    let run_dir = run_dir.unwrap_or_else(|| loaded.run_dir());
    let (_, template) = loaded.template_source(template)?;
    let pool = loaded.proxy_pool()?;
    let params = &loaded.cfg.params;
    let batch = sample_reference(&pool, params.reference_size, seed.unwrap_or(params.seed))?;
    let cache = loaded.cache(&run_dir)?;
    let oracle = loaded.oracle(&template, pool.verbalizer(), &[&batch.instances])?;
    let objective = Objective::new(oracle.as_ref(), &template, &batch.instances, pool.verbalizer(), &cache);
    let scores = compute_influence(&objective, &template.description)?;
    print!("{}", render_influence(&scores));
    Ok(())
}

pub fn neighborhood_csv(
    config: &Path,
    template: Option<&Path>,
    k: usize,
    seed: Option<u64>,
    out: Option<&Path>,
    run_dir: Option<PathBuf>,
) -> Result<()> {
    let loaded = Loaded::read(config)?;
    let run_dir = run_dir.unwrap_or_else(|| loaded.run_dir());
    let (_, template) = loaded.template_source(template)?;
    let pool = loaded.proxy_pool()?;
    let params = &loaded.cfg.params;
    let batch = sample_reference(&pool, params.reference_size, seed.unwrap_or(params.seed))?;
    let cache = loaded.cache(&run_dir)?;
    let provider = loaded.provider()?;
    let oracle = loaded.oracle(&template, pool.verbalizer(), &[&batch.instances])?;
    let objective = Objective::new(oracle.as_ref(), &template, &batch.instances, pool.verbalizer(), &cache);

    let sink: Box<dyn std::io::Write> = match out {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["variant_text", "changed_position", "candidate", "accuracy"])?;
    for n in neighborhood(provider.as_ref(), &template.description, k)? {
        let acc = objective.evaluate(&n.description)?.accuracy();
        w.write_record([
            n.description.render(),
            n.position.to_string(),
            n.candidate,
            acc.value().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn report(trace_path: &Path) -> Result<()> {
    let text = fs::read_to_string(trace_path)
        .with_context(|| format!("reading {}", trace_path.display()))?;
    let trace = OptimizationTrace::from_json(&text)
        .with_context(|| format!("parsing trace {}", trace_path.display()))?;
    let replayed = replay(&trace)?;
    if replayed != trace.final_description {
        bail!("trace's final description does not match its accepted steps");
    }
    print!("{}", render_trace(&trace));
    Ok(())
}
