//! Command implementations.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use cpicl::checkpoint::{self, CheckpointHeader};
use cpicl::conformal::{icl_predictor, ridge_oracle_predictor, IclPredictor, Predictor};
use cpicl::eval::{
    benchmark_time, point_curves, run_coverage_experiment, run_ood_experiment,
    run_wdist_experiment, ExperimentConfig, Method, MethodKind, BENCH_CONTEXT_SIZES,
};
use cpicl::lsa::{count_flops_per_step, train, TrainConfig};
use cpicl::report::{write_metrics, write_table, MetricRow};
use cpicl::rng;
use cpicl::scaling::{
    collect_scaling_data, fit_scaling_law, isoflop_contour, mean_width, optimal_allocation,
    read_datapoints, write_datapoints, LsaFlopsModel, ScalingFit,
};
use cpicl::stats::Summary;
use serde::Serialize;

use crate::config::AppConfig;
use crate::manifest::RunManifest;
use crate::{Cli, CliError, Command, EvalCommand, ScalingCommand};

struct Ctx {
    cfg: AppConfig,
    hash: String,
    seed: u64,
    out: PathBuf,
    checkpoint: Option<PathBuf>,
}

impl Ctx {
    fn from_cli(cli: &Cli) -> Result<Self, CliError> {
        let mut cfg = match &cli.config {
            Some(p) => AppConfig::load(p)?,
            None => AppConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg.gen.seed = s;
        }
        cfg.propagate_gen();
        cfg.train.validate()?;
        cfg.experiment.validate()?;
        std::fs::create_dir_all(&cli.out)?;
        Ok(Self {
            hash: cfg.hash(),
            seed: cfg.gen.seed,
            cfg,
            out: cli.out.clone(),
            checkpoint: cli.checkpoint.clone(),
        })
    }

    fn manifest(&self, command: &str) -> RunManifest {
        RunManifest::new(command, &self.hash, self.seed)
    }

    fn create(&self, name: &str, m: &mut RunManifest) -> Result<BufWriter<File>, CliError> {
        let path = self.out.join(name);
        m.outputs.push(path.clone());
        Ok(BufWriter::new(File::create(path)?))
    }

    fn load_icl(&self) -> Result<IclPredictor, CliError> {
        let path = self
            .checkpoint
            .as_ref()
            .ok_or_else(|| CliError::Usage("this evaluation needs --checkpoint".into()))?;
        if !path.exists() {
            return Err(CliError::Usage(format!("checkpoint {} not found", path.display())));
        }
        let (_, params) = checkpoint::load(path, Some(self.cfg.gen.d))?;
        Ok(icl_predictor(params))
    }

    fn context_sizes(&self) -> Vec<usize> {
        if self.cfg.experiment.context_sizes.is_empty() {
            vec![self.cfg.gen.n]
        } else {
            self.cfg.experiment.context_sizes.clone()
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(CliError::Usage("--workers must be >= 1".into()));
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    let ctx = Ctx::from_cli(cli)?;
    match cli.command {
        Command::Train => cmd_train(&ctx),
        Command::Eval { which } => cmd_eval(&ctx, which),
        Command::Scaling { which } => cmd_scaling(&ctx, which),
    }
}

#[derive(Serialize)]
struct TrainSummary {
    n_params: usize,
    steps_executed: usize,
    flops_total: u64,
    n_targets: u64,
    final_loss: Option<f64>,
    loss_curve: Vec<(usize, f64)>,
    manifest: String,
}

fn cmd_train(ctx: &Ctx) -> Result<(), CliError> {
    let mut m = ctx.manifest("train");
    let report = train(&ctx.cfg.train, &mut rng::training_stream(ctx.seed, 0))?;
    let path = ctx
        .checkpoint
        .clone()
        .unwrap_or_else(|| ctx.out.join("model.ckpt"));
    let header = CheckpointHeader::new(&ctx.cfg.train, ctx.seed);
    checkpoint::save(&path, &header, &report.final_params)?;
    m.outputs.push(path);
    let summary = TrainSummary {
        n_params: report.n_params,
        steps_executed: report.steps_executed,
        flops_total: report.flops_total,
        n_targets: report.n_targets,
        final_loss: report.loss_curve.last().map(|x| x.1),
        loss_curve: report.loss_curve,
        manifest: m.file_name(),
    };
    let w = ctx.create("train_report.json", &mut m)?;
    serde_json::to_writer_pretty(w, &summary).map_err(cpicl::Error::from)?;
    m.finish(&ctx.out)?;
    Ok(())
}

fn ridge_for(cfg: &ExperimentConfig) -> cpicl::Result<Box<dyn Predictor>> {
    Ok(Box::new(ridge_oracle_predictor(cfg.ridge_lambda()?)?))
}

fn method_for<'a>(
    kind: MethodKind,
    cfg: &ExperimentConfig,
    icl: Option<&'a dyn Predictor>,
    ridge: &'a dyn Predictor,
) -> Result<Method<'a>, CliError> {
    Ok(match kind {
        MethodKind::CpIcl => Method::FullCp(
            icl.ok_or_else(|| CliError::Usage("cp_icl needs --checkpoint".into()))?,
        ),
        MethodKind::CpRidge => Method::FullCp(ridge),
        MethodKind::SplitCpRidge => Method::SplitCp {
            lambda: cfg.ridge_lambda()?,
            cal_fraction: cfg.cal_fraction,
        },
    })
}

fn point(v: f64) -> Summary {
    Summary { median: v, lo: v, hi: v }
}

fn cmd_eval(ctx: &Ctx, which: EvalCommand) -> Result<(), CliError> {
    let exp = &ctx.cfg.experiment;
    let h = ctx.hash.as_str();
    match which {
        EvalCommand::Coverage => {
            let mut m = ctx.manifest("eval coverage");
            let icl = match exp.method {
                MethodKind::CpIcl => Some(ctx.load_icl()?),
                _ => None,
            };
            let ridge = ridge_oracle_predictor(exp.ridge_lambda()?)?;
            let mut rows = Vec::new();
            let mut timing = serde_json::Map::new();
            for n in ctx.context_sizes() {
                let mut c = exp.clone();
                c.gen.n = n;
                let icl_ref = icl.as_ref().map(|p| p as &dyn Predictor);
                let method = method_for(exp.method, &c, icl_ref, &ridge)?;
                let r = run_coverage_experiment(&c, method)?;
                let id = format!("coverage/{}/n={n}", exp.method.as_str());
                rows.push(MetricRow::new(&id, h, "coverage", r.coverage));
                rows.push(MetricRow::new(&id, h, "width", r.width));
                timing.insert(id, serde_json::to_value(r.seconds).unwrap_or_default());
            }
            write_metrics(ctx.create("coverage.csv", &mut m)?, &rows)?;
            m.timing = serde_json::Value::Object(timing);
            m.finish(&ctx.out)?;
        }
        EvalCommand::Wdist => {
            let mut m = ctx.manifest("eval wdist");
            let icl = ctx.load_icl()?;
            let ridge = ridge_oracle_predictor(exp.ridge_lambda()?)?;
            let table = run_wdist_experiment(exp, &icl, &ridge)?;
            let rows: Vec<MetricRow> = table
                .iter()
                .flat_map(|r| {
                    let id = format!("wdist/d={}/n={}", r.d, r.n);
                    [
                        MetricRow::new(&id, h, "ratio", point(r.ratio)),
                        MetricRow::new(&id, h, "w1_mean", point(r.mean_w1)),
                        MetricRow::new(&id, h, "w1_run", r.w1),
                    ]
                })
                .collect();
            write_metrics(ctx.create("wdist.csv", &mut m)?, &rows)?;
            m.finish(&ctx.out)?;
        }
        EvalCommand::Ood => {
            let mut m = ctx.manifest("eval ood");
            let icl = ctx.load_icl()?;
            let table = run_ood_experiment(exp, &icl, &ridge_for)?;
            let rows: Vec<MetricRow> = table
                .iter()
                .flat_map(|r| {
                    let id = format!("ood/{}={}", r.parameter, r.value);
                    [
                        MetricRow::new(&id, h, "coverage", r.coverage),
                        MetricRow::new(&id, h, "w1_mean", point(r.mean_w1)),
                    ]
                })
                .collect();
            write_metrics(ctx.create("ood.csv", &mut m)?, &rows)?;
            m.finish(&ctx.out)?;
        }
        EvalCommand::Bench => {
            let mut m = ctx.manifest("eval bench");
            let icl = match &ctx.checkpoint {
                Some(_) => Some(ctx.load_icl()?),
                None => None,
            };
            let ridge = ridge_oracle_predictor(exp.ridge_lambda()?)?;
            let mut methods = Vec::new();
            if let Some(p) = &icl {
                methods.push((MethodKind::CpIcl, Method::FullCp(p)));
            }
            methods.push((MethodKind::CpRidge, Method::FullCp(&ridge)));
            methods.push((
                MethodKind::SplitCpRidge,
                method_for(MethodKind::SplitCpRidge, exp, None, &ridge)?,
            ));
            let sizes = if exp.context_sizes.is_empty() {
                BENCH_CONTEXT_SIZES.to_vec()
            } else {
                exp.context_sizes.clone()
            };
            let table = benchmark_time(exp, &methods, &sizes)?;
            let rows: Vec<MetricRow> = table
                .iter()
                .map(|r| MetricRow::new(&format!("bench/{}/n={}", r.method, r.n), h, "seconds", r.seconds))
                .collect();
            write_metrics(ctx.create("bench.csv", &mut m)?, &rows)?;
            m.finish(&ctx.out)?;
        }
        EvalCommand::Point => {
            let mut m = ctx.manifest("eval point");
            let icl = ctx.load_icl()?;
            let ridge = ridge_oracle_predictor(exp.ridge_lambda()?)?;
            let c = point_curves(exp, &icl, &ridge)?;
            let rows: Vec<Vec<f64>> = c
                .grid
                .values()
                .iter()
                .zip(c.pi_icl.iter().zip(&c.pi_ridge))
                .map(|(z, (a, b))| vec![*z, *a, *b])
                .collect();
            write_table(ctx.create("point.csv", &mut m)?, &["z", "pi_icl", "pi_ridge"], &rows)?;
            m.timing = serde_json::json!({ "y_true": c.y_true });
            m.finish(&ctx.out)?;
        }
    }
    Ok(())
}

/// One training config per (budget, depth), with enough steps to exhaust
/// the budget.
pub fn sweep_configs(base: &TrainConfig, budgets: &[u64], layers: &[usize]) -> cpicl::Result<Vec<TrainConfig>> {
    let mut out = Vec::new();
    for &budget in budgets {
        for &l in layers {
            let mut c = base.clone();
            c.layers = l;
            c.flop_budget = Some(budget);
            let per = count_flops_per_step(c.gen.d, c.gen.n, l, c.batch_size)?;
            c.steps = (budget / per).max(1) as usize;
            out.push(c);
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct FitOutput<'a> {
    #[serde(flatten)]
    fit: &'a ScalingFit,
    manifest: String,
}

fn cmd_scaling(ctx: &Ctx, which: ScalingCommand) -> Result<(), CliError> {
    let sc = &ctx.cfg.scaling;
    let data_path = sc.data.clone().unwrap_or_else(|| ctx.out.join("scaling_data.csv"));
    let fit_path = sc.fit.clone().unwrap_or_else(|| ctx.out.join("scaling_fit.json"));
    match which {
        ScalingCommand::Sweep => {
            let mut m = ctx.manifest("scaling sweep");
            let cfgs = sweep_configs(&ctx.cfg.train, &sc.budgets, &sc.layers)?;
            let mut eval = ctx.cfg.experiment.clone();
            eval.method = MethodKind::CpIcl;
            let results = collect_scaling_data(&cfgs, &eval, ctx.seed, &mean_width)?;
            let mut data = Vec::new();
            let mut failures = Vec::new();
            for (i, r) in results.into_iter().enumerate() {
                match r {
                    Ok(p) => data.push(p),
                    Err(e) => failures.push(format!("config {i}: {e}")),
                }
            }
            m.outputs.push(data_path.clone());
            write_datapoints(BufWriter::new(File::create(&data_path)?), &data)?;
            m.timing = serde_json::json!({ "failures": failures });
            m.finish(&ctx.out)?;
        }
        ScalingCommand::Fit => {
            let mut m = ctx.manifest("scaling fit");
            let file = File::open(&data_path).map_err(|e| {
                CliError::Usage(format!("cannot open {}: {e}", data_path.display()))
            })?;
            let data = read_datapoints(file)?;
            let fit = fit_scaling_law(&data, sc.lambda_asym, sc.n_starts)?;
            m.outputs.push(fit_path.clone());
            let out = FitOutput { fit: &fit, manifest: m.file_name() };
            serde_json::to_writer_pretty(BufWriter::new(File::create(&fit_path)?), &out)
                .map_err(cpicl::Error::from)?;
            m.finish(&ctx.out)?;
        }
        ScalingCommand::Allocate => {
            let mut m = ctx.manifest("scaling allocate");
            let fit = read_fit(&fit_path)?;
            let t = &ctx.cfg.train;
            let model = LsaFlopsModel { d: t.gen.d, n: t.gen.n, batch_size: t.batch_size };
            let mut alloc = Vec::new();
            let mut contour = Vec::new();
            for &c in &sc.allocate {
                let (n, d) = optimal_allocation(&fit, c, &model)?;
                alloc.push(vec![c, n, d, fit.predict(n, d)]);
                for p in isoflop_contour(&fit, c, &model, sc.contour_points)? {
                    contour.push(vec![c, p.n_params, p.n_data, p.loss]);
                }
            }
            write_table(ctx.create("allocation.csv", &mut m)?, &["C", "N", "D", "loss"], &alloc)?;
            write_table(ctx.create("isoflop.csv", &mut m)?, &["C", "N", "D", "loss"], &contour)?;
            m.finish(&ctx.out)?;
        }
    }
    Ok(())
}

fn read_fit(path: &Path) -> Result<ScalingFit, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read fit {}: {e}", path.display())))?;
    let mut fit: ScalingFit = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("invalid fit {}: {e}", path.display())))?;
    let (a, b) = cpicl::scaling::allocation_exponents(fit.alpha, fit.beta);
    fit.a = a;
    fit.b = b;
    Ok(fit)
}
