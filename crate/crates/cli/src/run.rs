use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ddam_core::data::{self, default_fraction_schedule, ArchetypeConfig};
use ddam_core::denoiser::{self, train_from};
use ddam_core::duality::verify_duality;
use ddam_core::experiments::{self, EvalSets, ExperimentSelection};
use ddam_core::metrics::laplace_entropy_check;
use ddam_core::pseudo_am::{basin_radius, margin_report, train_pl, update_deterministic, AmTrainConfig};
use ddam_core::uddm::posterior_discrepancy;
use ddam_core::{
    seed, CoupledLogitsDenoiser, Dataset, DiffusionSchedule, FractionSchedule, PatternSet, SpinPattern, SweepConfig,
    TrainConfig,
};
use rand::Rng;

use crate::args::*;

pub fn write(dir: &Path, name: &str, body: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, body).with_context(|| format!("writing {}", path.display()))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn schedule(a: &ScheduleArgs) -> Result<DiffusionSchedule> {
    Ok(DiffusionSchedule::new(a.schedule, a.beta_slope, a.epsilon)?)
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Ok(Dataset::load(path)?)
}

fn parse_patterns(text: &str, path: &Path) -> Result<PatternSet> {
    let mut patterns = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let spins: Option<Vec<i8>> = if line.contains(char::is_whitespace) {
            line.split_whitespace().map(|t| t.parse::<i8>().ok()).collect()
        } else {
            line.chars().map(|c| match c {
                '+' => Some(1),
                '-' => Some(-1),
                _ => None,
            }).collect()
        };
        let spins = spins.with_context(|| format!("{}:{}: expected +/- characters or 1/-1 tokens", path.display(), i + 1))?;
        patterns.push(SpinPattern::new(spins).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(PatternSet::new(patterns)?)
}

fn format_patterns(set: &PatternSet) -> String {
    set.patterns()
        .iter()
        .map(|p| p.spins().iter().map(|&s| if s > 0 { '+' } else { '-' }).collect::<String>() + "\n")
        .collect()
}

pub fn am(a: &AmArgs, out: &Path) -> Result<()> {
    let patterns = match &a.patterns {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            parse_patterns(&text, path)?
        }
        None => PatternSet::random(a.p, a.l, &mut seed::stream(a.seed, "am-patterns", 0))?,
    };
    let cfg = AmTrainConfig { learning_rate: a.lr, max_epochs: a.epochs, tol: a.tol, beta: a.beta };
    let (w, trace) = train_pl(&patterns, &cfg)?;
    create_dir(out)?;
    w.save(&out.join("couplings.plam"))?;
    write(out, "patterns.txt", format_patterns(&patterns))?;
    let mut loss = String::from("epoch,loss\n");
    for (i, l) in trace.iter().enumerate() {
        let _ = writeln!(loss, "{},{l}", i + 1);
    }
    write(out, "loss.csv", loss)?;

    let mut margins = String::from("pattern,site,margin\n");
    let mut basins = String::from("pattern,min_margin,separable,fixed_point,basin_radius\n");
    for (i, p) in patterns.patterns().iter().enumerate() {
        let report = margin_report(p, &w)?;
        for (site, m) in report.per_site_margins.iter().enumerate() {
            let _ = writeln!(margins, "{i},{site},{m}");
        }
        let fixed = update_deterministic(p, &w)? == *p;
        let radius = basin_radius(p, &w, a.trials, &mut seed::stream(a.seed, "am-basin", i as u64))?;
        let _ = writeln!(basins, "{i},{},{},{fixed},{radius}", report.min_margin, report.separable);
    }
    write(out, "margins.csv", margins)?;
    write(out, "basins.csv", basins)?;
    let fixed_points = patterns.patterns().iter().filter(|p| update_deterministic(p, &w).ok().as_ref() == Some(*p)).count();
    eprintln!("am: {} epochs, final loss {:.6}, {fixed_points}/{} patterns are fixed points", trace.len(), trace.last().copied().unwrap_or(f64::NAN), patterns.count());
    Ok(())
}

pub fn fraction_schedule(name: &str, truncate: Option<usize>) -> Result<FractionSchedule> {
    if name != "default" {
        bail!("unknown fraction schedule {name:?}; only `default` is defined");
    }
    let s = default_fraction_schedule();
    Ok(match truncate {
        Some(n) => s.truncate_evenly(n),
        None => s,
    })
}

pub fn data(cmd: &DataCommand) -> Result<PathBuf> {
    let (ds, out) = match cmd {
        DataCommand::GenArchetype(a) => {
            let cfg = ArchetypeConfig {
                archetypes: a.archetypes,
                seq_len: a.l,
                vocab_size: a.k,
                n_train: a.n_train,
                n_test: a.n_test,
                resample_prob: a.resample_prob,
            };
            (data::gen_archetype_dataset(&cfg, a.seed)?, &a.out)
        }
        DataCommand::GenMarkov(a) => (data::gen_markov_dataset(&a.transition.0, a.n_train, a.n_test, a.l, a.seed)?, &a.out),
        DataCommand::Ingest(a) => (data::ingest_text(&a.input, a.l, a.seed)?, &a.out),
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    ds.save(out)?;
    eprintln!("data: {} train, {} test sequences (L={}, K={})", ds.train.len(), ds.test.len(), ds.seq_len, ds.vocab_size);
    Ok(out.clone())
}

pub fn train(a: &TrainArgs, out: &Path, echo: &str) -> Result<()> {
    let ds = load_dataset(&a.dataset)?;
    let cfg = TrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        eval_every: a.eval_every,
        eval_sequences: a.eval_sequences,
        eval_time_samples: a.eval_time_samples,
        eval_grid_steps: a.eval_grid_steps,
        max_grad_norm: a.max_grad_norm,
        schedule: schedule(&a.schedule)?,
    };
    let model = match &a.init {
        Some(path) => CoupledLogitsDenoiser::load_checkpoint_expecting(path, ds.seq_len, ds.vocab_size)?,
        None if a.start_epoch > 0 => bail!("--start-epoch {} needs --init with the checkpoint from that epoch", a.start_epoch),
        None => {
            let count = denoiser::parameter_count(ds.seq_len, ds.vocab_size).unwrap_or(usize::MAX);
            eprintln!("train: L={}, K={}, {count} parameters", ds.seq_len, ds.vocab_size);
            CoupledLogitsDenoiser::zeros(ds.seq_len, ds.vocab_size)?
        }
    };
    let (model, log) = train_from(model, &ds, &cfg, a.start_epoch)?;
    create_dir(out)?;
    write(out, "config.echo", echo)?;
    model.save_checkpoint(&out.join("checkpoint.bin"))?;
    write(out, "train_log.csv", log.to_csv())?;
    if let (Some(first), Some(last)) = (log.records.first(), log.records.last()) {
        eprintln!("train: epochs {}..{}, loss {:.6} -> {:.6}", first.epoch, last.epoch, first.train_loss, last.train_loss);
    }
    Ok(())
}

fn eval_inputs(a: &EvalArgs) -> Result<(Dataset, CoupledLogitsDenoiser, DiffusionSchedule)> {
    let ds = load_dataset(&a.dataset)?;
    let model = CoupledLogitsDenoiser::load_checkpoint_expecting(&a.checkpoint, ds.seq_len, ds.vocab_size)?;
    Ok((ds, model, schedule(&a.schedule)?))
}

fn eval_sets<'a>(ds: &'a Dataset, a: &EvalArgs) -> EvalSets<'a> {
    EvalSets {
        train: &ds.train[..ds.train.len().min(a.max_train_eval)],
        test: &ds.test[..ds.test.len().min(a.max_test_eval)],
        fraction: a.fraction,
    }
}

pub fn exp1(a: &Exp1Args, out: &Path, echo: &str) -> Result<()> {
    let (ds, model, sched) = eval_inputs(&a.eval)?;
    let seed = seed::derive(a.eval.seed, "exp1", 0);
    let curve = experiments::exp1_deterministic(&model, eval_sets(&ds, &a.eval), &a.corruption_grid.0, a.reverse_start_t, a.eval.num_steps, &sched, seed)?;
    create_dir(out)?;
    write(out, "config.echo", echo)?;
    write(out, "curves.csv", curve.to_csv())
}

pub fn exp2(a: &Exp2Args, out: &Path, echo: &str) -> Result<()> {
    let (ds, model, sched) = eval_inputs(&a.eval)?;
    let seed = seed::derive(a.eval.seed, "exp2", 0);
    let curve = experiments::exp2_stochastic(&model, eval_sets(&ds, &a.eval), &a.t_grid.0, a.eval.num_steps, &sched, seed)?;
    create_dir(out)?;
    write(out, "config.echo", echo)?;
    write(out, "curves.csv", curve.to_csv())
}

pub fn exp3(a: &Exp3Args, out: &Path, echo: &str) -> Result<()> {
    let ds = load_dataset(&a.dataset)?;
    let model = CoupledLogitsDenoiser::load_checkpoint_expecting(&a.checkpoint, ds.seq_len, ds.vocab_size)?;
    let sched = schedule(&a.schedule)?;
    let train = &ds.train[..ds.train.len().min(a.max_train_eval)];
    let seed = seed::derive(a.seed, "exp3", 0);
    let r = experiments::exp3_generative(&model, train, a.n_samples, a.eval_t, a.num_steps, a.final_step, &sched, seed)?;
    create_dir(out)?;
    write(out, "config.echo", echo)?;
    write(out, "entropy_train.csv", r.train.to_csv())?;
    write(out, "entropy_synth.csv", r.synth.to_csv())?;
    write(out, "histogram_train.csv", r.train.histogram.to_csv())?;
    write(out, "histogram_synth.csv", r.synth.histogram.to_csv())?;
    write(out, "entropy_gap.csv", format!("mean_gap,ks_statistic\n{},{}\n", r.gap.mean_gap, r.gap.ks_statistic))?;
    let samples: String = r.samples.iter().map(|s| s.tokens().iter().map(usize::to_string).collect::<Vec<_>>().join(" ") + "\n").collect();
    write(out, "samples.txt", samples)?;
    eprintln!("exp3: mean entropy train {:.4}, synthetic {:.4}, KS {:.4}", r.train.mean, r.synth.mean, r.gap.ks_statistic);
    Ok(())
}

pub fn sweep(a: &SweepArgs, workers: usize, out: &Path, echo: &str) -> Result<()> {
    let generated = a.dataset.is_none();
    let ds = match &a.dataset {
        Some(path) => load_dataset(path)?,
        None => {
            let cfg = ArchetypeConfig {
                archetypes: a.archetypes,
                seq_len: a.l,
                vocab_size: a.k,
                n_train: a.n_train,
                n_test: a.n_test,
                resample_prob: a.resample_prob,
            };
            data::gen_archetype_dataset(&cfg, seed::derive(a.seed, "dataset", 0))?
        }
    };
    let fractions = if a.fractions == "default" {
        fraction_schedule("default", a.truncate)?
    } else {
        let s = FractionSchedule::new(real_list(&a.fractions).map_err(anyhow::Error::msg)?.0)?;
        a.truncate.map_or(s.clone(), |n| s.truncate_evenly(n))
    };
    let mut cfg = SweepConfig::new(fractions);
    cfg.train = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch_size,
        max_grad_norm: a.max_grad_norm,
        eval_every: 0,
        schedule: schedule(&a.schedule)?,
        ..cfg.train
    };
    cfg.train_steps = Some(a.train_steps);
    cfg.experiments = ExperimentSelection { exp1: a.experiments.exp1, exp2: a.experiments.exp2, exp3: a.experiments.exp3 };
    cfg.base_seed = a.seed;
    cfg.corruption_grid = a.corruption_grid.0.clone();
    cfg.exp1_start_t = a.reverse_start_t;
    cfg.t_grid = a.t_grid.0.clone();
    cfg.num_steps = a.num_steps;
    cfg.n_samples = a.n_samples;
    cfg.final_step = a.final_step;
    cfg.eval_t = a.eval_t;
    cfg.reference_t = a.reference_t;
    cfg.transition_tol = a.transition_tol;
    cfg.max_train_eval = a.max_train_eval;
    cfg.max_test_eval = a.max_test_eval;
    cfg.workers = workers;

    let outcome = experiments::sweep(&ds, &cfg)?;
    create_dir(out)?;
    write(out, "config.echo", echo)?;
    if generated {
        ds.save(&out.join("dataset.txt"))?;
    }
    outcome.write_run_dir(out)?;
    for row in &outcome.report.rows {
        if let experiments::FractionStatus::Skipped(reason) = &row.status {
            eprintln!("sweep: fraction {} skipped: {reason}", row.fraction);
        }
    }
    match outcome.report.detected_transition_fraction {
        Some(f) => eprintln!("sweep: train/test recovery converge from fraction {f}"),
        None => eprintln!("sweep: no transition detected"),
    }
    Ok(())
}

pub fn duality(a: &DualityArgs, out: &Path, echo: &str) -> Result<()> {
    let ks = a
        .k
        .split(',')
        .map(|v| v.trim().parse::<usize>().with_context(|| format!("--K: invalid vocabulary size {v:?}")))
        .collect::<Result<Vec<_>>>()?;
    let mut csv = String::new();
    let mut all_ok = true;
    for (i, &k) in ks.iter().enumerate() {
        let report = verify_duality(&a.grid.0, k, a.samples, seed::derive(a.seed, "duality-k", i as u64))?;
        all_ok &= report.all_within_three_sigma();
        let body = report.to_csv();
        if i == 0 {
            csv.push_str(&body);
        } else {
            csv.extend(body.lines().skip(1).map(|l| format!("{l}\n")));
        }
    }
    create_dir(out)?;
    write(out, "config.echo", echo)?;
    write(out, "duality.csv", csv)?;
    eprintln!("duality-verify: all deviations within 3 sigma: {all_ok}");
    Ok(())
}

fn random_spd<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> nalgebra::DMatrix<f64> {
    let b = nalgebra::DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
    &b * b.transpose() + nalgebra::DMatrix::identity(dim, dim) * 0.5
}

pub fn laplace(a: &LaplaceArgs, out: &Path, echo: &str) -> Result<()> {
    let hessians: Vec<nalgebra::DMatrix<f64>> = match &a.hessian {
        Some(m) => {
            let d = m.0.len();
            if m.0.iter().any(|r| r.len() != d) {
                bail!("--hessian must be square, got {d} rows of length {}", m.0[0].len());
            }
            vec![nalgebra::DMatrix::from_fn(d, d, |i, j| m.0[i][j])]
        }
        None => {
            let mut rng = seed::stream(a.seed, "laplace", 0);
            (0..a.random)
                .map(|_| {
                    let d = rng.random_range(1..=a.max_dim);
                    random_spd(d, &mut rng)
                })
                .collect()
        }
    };
    let mut csv = String::from("index,dim,entropy_exact,formula_value,abs_diff\n");
    let mut worst = 0.0f64;
    for (i, h) in hessians.iter().enumerate() {
        let c = laplace_entropy_check(h)?;
        worst = worst.max(c.abs_diff);
        let _ = writeln!(csv, "{i},{},{},{},{}", h.nrows(), c.entropy_exact, c.formula_value, c.abs_diff);
    }
    create_dir(out)?;
    write(out, "config.echo", echo)?;
    write(out, "laplace.csv", csv)?;
    eprintln!("laplace-check: {} Hessians, max abs_diff {worst:e}", hessians.len());
    Ok(())
}

pub fn posterior(a: &PosteriorArgs, out: &Path, echo: &str) -> Result<()> {
    let d = posterior_discrepancy(a.z_t, a.x, a.alpha_s, a.alpha_t, a.k)?;
    let mut csv = String::from("category,bayes,closed_form_literal\n");
    for (i, (b, c)) in d.bayes.probs().iter().zip(&d.closed_form).enumerate() {
        let _ = writeln!(csv, "{i},{b},{c}");
    }
    create_dir(out)?;
    write(out, "config.echo", echo)?;
    write(out, "posterior.csv", csv)?;
    write(
        out,
        "posterior_summary.csv",
        format!(
            "closed_form_mass,normalization_defect,max_abs_diff_normalized\n{},{},{}\n",
            d.closed_form_mass, d.normalization_defect, d.max_abs_diff_normalized
        ),
    )?;
    eprintln!("posterior-check: literal closed form has mass {} (defect {:+})", d.closed_form_mass, d.normalization_defect);
    Ok(())
}
