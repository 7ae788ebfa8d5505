use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use epismc_core::comparison::{batch_criteria, write_comparison_csv};
use epismc_core::data_io::{default_delay_distribution, default_t0, load_dataset};
use epismc_core::diagnostics::{summarize_component, write_summary_csv};
use epismc_core::forecast::{origins_from_chains, origins_from_cloud, write_forecast_csv, Aggregation};
use epismc_core::inference_batch::{write_draws_csv, write_regimes_csv};
use epismc_core::inference_seq::{Checkpoint, NutsRejuvenation, PlRecord};
use epismc_core::simulate::default_synthetic_schedules;
use epismc_core::{
    predict, run_chains, seeded, simulate, AugmentedState, ChainConfig, ChainInit, ChainOutput, CriterionReport,
    Error, FilterConfig, IfrSchedule, Observation, PGibbsConfig, PlSeries, SeirFamily, Smc2, Smc2Config,
    ThetaParams,
};

use crate::config::{self, Config};
use crate::manifest::Recorder;
use crate::{AggregationArg, Command, Common, EstimatorArg};

/// Written by both fit commands so later commands can rebuild the model.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunInfo {
    pub command: String,
    pub family: SeirFamily,
    pub observations: Vec<Observation>,
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate { common, t } => cmd_simulate(&common, t),
        Command::FitBatch {
            common,
            data,
            chains,
            iters,
            burnin,
            particles,
            criteria_thin,
        } => {
            let mut cfg = config::load(common.config.as_deref())?;
            cfg.data = data.or(cfg.data);
            let b = &mut cfg.batch;
            b.chains = chains.unwrap_or(b.chains);
            b.iters = iters.unwrap_or(b.iters);
            b.burnin = burnin.unwrap_or(b.burnin);
            b.particles = particles.unwrap_or(b.particles);
            b.criteria_thin = criteria_thin.unwrap_or(b.criteria_thin);
            cmd_fit_batch(&common, cfg)
        }
        Command::FitSeq {
            common,
            data,
            n,
            m,
            t0,
            sweeps,
            checkpoint_every,
            resume,
        } => {
            let mut cfg = config::load(common.config.as_deref())?;
            cfg.data = data.or(cfg.data);
            let s = &mut cfg.seq;
            s.n = n.unwrap_or(s.n);
            s.m = m.unwrap_or(s.m);
            s.t0 = t0.or(s.t0);
            s.sweeps = sweeps.unwrap_or(s.sweeps);
            s.checkpoint_every = checkpoint_every.or(s.checkpoint_every);
            cmd_fit_seq(&common, cfg, resume.as_deref())
        }
        Command::Forecast {
            common,
            run,
            horizon,
            aggregation,
            draws,
        } => {
            let mut cfg = config::load(common.config.as_deref())?;
            let f = &mut cfg.forecast;
            f.horizon = horizon.unwrap_or(f.horizon);
            f.draws = draws.unwrap_or(f.draws);
            if let Some(a) = aggregation {
                f.aggregation = match a {
                    AggregationArg::Daily => Aggregation::Daily,
                    AggregationArg::Weekly => Aggregation::Weekly,
                };
            }
            cmd_forecast(&common, cfg, &run)
        }
        Command::Compare { runs, estimator, out } => cmd_compare(&runs, estimator, &out),
        Command::Diagnose { run, out } => cmd_diagnose(&run, &out),
    }
}

fn json_out<T: Serialize>(path: &Path, v: &T, rec: &mut Recorder) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    rec.output(path);
    Ok(())
}

fn csv_out(path: &Path, rec: &mut Recorder, f: impl FnOnce(BufWriter<File>) -> epismc_core::Result<()>) -> Result<()> {
    f(BufWriter::new(File::create(path)?))?;
    rec.output(path);
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| anyhow::Error::new(Error::Validation(format!("{}: {e}", path.display()))))
}

fn cmd_simulate(common: &Common, t: Option<usize>) -> Result<()> {
    let mut cfg = config::load(common.config.as_deref())?;
    cfg.simulate.t = t.unwrap_or(cfg.simulate.t);
    let mut rec = Recorder::new("simulate", &cfg, common.seed)?;
    let s = &cfg.simulate;
    let fixed = cfg.model.fixed_config(s.window);
    let theta = match &s.theta {
        Some(t) => t.clone(),
        None if fixed.k == 4 => ThetaParams::reference_k4(),
        None => bail!(Error::Validation("simulate.theta is required unless k = 4".into())),
    };
    let mut sched = default_synthetic_schedules(default_delay_distribution(fixed.window)?);
    sched.ifr = IfrSchedule::constant(s.ifr);
    let origin: chrono::NaiveDate = s
        .origin
        .parse()
        .map_err(|e| Error::Validation(format!("simulate.origin: {e}")))?;
    let d = simulate(&theta, &fixed, &sched, s.t, common.seed)?;
    d.write(&common.out, origin)?;
    for f in ["cases.csv", "deaths.csv", "vaccinations.csv", "delay.csv", "dataset.json", "truth.json", "latent.csv"] {
        rec.output(common.out.join(f));
    }
    let mut used = cfg.clone();
    used.model.fixed = Some(fixed);
    json_out(&common.out.join("config.json"), &used, &mut rec)?;
    rec.finish(&common.out)
}

fn load_family(cfg: &Config) -> Result<(SeirFamily, Vec<Observation>)> {
    let path = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::Validation("no dataset given (use --data or `data` in the config)".into()))?;
    let ds = load_dataset(path)?;
    let fixed = cfg.model.fixed_config(ds.window);
    fixed.validate()?;
    let family = SeirFamily {
        prior: cfg.model.prior(fixed.k),
        cfg: fixed,
        sched: ds.schedules()?,
        kind: cfg.model.kind,
    };
    family.prior.validate()?;
    Ok((family, ds.observations()))
}

fn cmd_fit_batch(common: &Common, cfg: Config) -> Result<()> {
    let mut rec = Recorder::new("fit-batch", &cfg, common.seed)?;
    let (family, obs) = load_family(&cfg)?;
    let b = &cfg.batch;
    let cc = ChainConfig {
        n_chains: b.chains,
        n_iters: b.iters,
        n_burnin: b.burnin,
        init: ChainInit::Prior,
        seed: common.seed,
        pg: PGibbsConfig {
            filter: FilterConfig::new(b.particles),
            gradient: b.gradient,
        },
    };
    let chains = run_chains(&family, &obs, &cc)?;
    let out = &common.out;
    std::fs::create_dir_all(out)?;
    let names = family.cfg.layout().names();
    csv_out(&out.join("draws.csv"), &mut rec, |w| write_draws_csv(&chains, &names, w))?;
    csv_out(&out.join("regimes.csv"), &mut rec, |w| write_regimes_csv(&chains, w))?;
    let rows = summary_rows(&chains, &names)?;
    csv_out(&out.join("summary.csv"), &mut rec, |w| write_summary_csv(&rows, w))?;
    json_out(&out.join("chains.json"), &chains, &mut rec)?;
    let (dic, waic) = if b.criteria_thin > 0 {
        let (d, w) = batch_criteria(
            &family,
            &obs,
            &chains,
            b.criteria_thin,
            &FilterConfig::new(b.particles),
            common.seed,
        )?;
        (Some(d), Some(w))
    } else {
        (None, None)
    };
    let report = CriterionReport {
        label: "fit-batch".into(),
        dic,
        waic,
        pl: None,
    };
    json_out(&out.join("criteria.json"), &report, &mut rec)?;
    let info = RunInfo {
        command: "fit-batch".into(),
        family,
        observations: obs,
    };
    json_out(&out.join("run.json"), &info, &mut rec)?;
    rec.finish(out)
}

fn summary_rows(chains: &[ChainOutput], names: &[String]) -> Result<Vec<epismc_core::diagnostics::SummaryRow>> {
    names
        .iter()
        .enumerate()
        .map(|(j, n)| {
            let per: Vec<Vec<f64>> = chains.iter().map(|c| c.retained_component(j)).collect();
            Ok(summarize_component(n, &per)?)
        })
        .collect()
}

fn pl_row(r: &PlRecord) -> String {
    format!(
        "{},{:.17e},{:.17e},{:.17e},{:.6},{}\n",
        r.t,
        r.log_pl,
        r.log_pl_pred,
        r.cum_log_pl,
        r.ess,
        u8::from(r.resampled)
    )
}

fn write_checkpoint(path: &Path, cp: &Checkpoint<ThetaParams, AugmentedState>) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_string(cp)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn cmd_fit_seq(common: &Common, cfg: Config, resume: Option<&Path>) -> Result<()> {
    let mut rec = Recorder::new("fit-seq", &cfg, common.seed)?;
    let (family, obs) = load_family(&cfg)?;
    let s = &cfg.seq;
    let rejuv = NutsRejuvenation {
        tune_iters: s.tune_iters,
        ..NutsRejuvenation::default()
    };
    let out = &common.out;
    std::fs::create_dir_all(out)?;
    let mut smc = match resume {
        Some(p) => {
            let cp: Checkpoint<ThetaParams, AugmentedState> = read_json(p)?;
            Smc2::from_checkpoint(&family, rejuv, cp)?
        }
        None => {
            let t0 = s.t0.unwrap_or_else(|| default_t0(&obs, s.t0_min_deaths));
            let mut sc = Smc2Config::new(s.n, s.m, t0);
            sc.resample_threshold = s.resample_threshold;
            sc.sweeps = s.sweeps;
            Smc2::initialise(&family, rejuv, sc, &obs, common.seed)?
        }
    };
    let pl_path = out.join("pl.csv");
    let ckpt_path = out.join("checkpoint.json");
    let mut pl = BufWriter::new(File::create(&pl_path)?);
    pl.write_all(b"t,log_pl,log_pl_pred,cum_log_pl,ess,resampled\n")?;
    for r in &smc.cloud.records {
        pl.write_all(pl_row(r).as_bytes())?;
    }
    pl.flush()?;
    let mut steps = 0usize;
    while !smc.finished(&obs) {
        let r = smc.step(&obs)?;
        pl.write_all(pl_row(&r).as_bytes())?;
        pl.flush()?;
        steps += 1;
        if s.checkpoint_every.is_some_and(|k| k > 0 && steps % k == 0) {
            write_checkpoint(&ckpt_path, &smc.checkpoint())?;
        }
    }
    drop(pl);
    rec.output(&pl_path);
    write_checkpoint(&ckpt_path, &smc.checkpoint())?;
    rec.output(&ckpt_path);

    let cloud = &smc.cloud;
    let w = cloud.normalised_weights().ok_or(Error::Degeneracy { t: cloud.t_next })?;
    let names = family.cfg.layout().names();
    csv_out(&out.join("posterior.csv"), &mut rec, |wr| {
        let mut wr = csv::Writer::from_writer(wr);
        let mut header = vec!["particle".to_string(), "weight".to_string()];
        header.extend(names.iter().cloned());
        wr.write_record(&header)?;
        for (i, th) in cloud.thetas.iter().enumerate() {
            let mut row = vec![i.to_string(), format!("{:.17e}", w[i])];
            row.extend(th.reported_values().iter().map(|x| format!("{x:.17e}")));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    })?;
    let start = cloud.records.first().map_or(cloud.t_next, |r| r.t);
    let report = CriterionReport {
        label: "fit-seq".into(),
        dic: None,
        waic: None,
        pl: Some(PlSeries {
            label: "fit-seq".into(),
            start,
            values: cloud.records.iter().map(|r| r.log_pl).collect(),
        }),
    };
    json_out(&out.join("criteria.json"), &report, &mut rec)?;
    let info = RunInfo {
        command: "fit-seq".into(),
        family: family.clone(),
        observations: obs,
    };
    json_out(&out.join("run.json"), &info, &mut rec)?;
    rec.finish(out)
}

fn cmd_forecast(common: &Common, cfg: Config, run: &Path) -> Result<()> {
    let mut rec = Recorder::new("forecast", &(&cfg.forecast, run), common.seed)?;
    let info: RunInfo = read_json(&run.join("run.json"))?;
    let mut rng = seeded(common.seed);
    let origins = match info.command.as_str() {
        "fit-seq" => {
            let cp: Checkpoint<ThetaParams, AugmentedState> = read_json(&run.join("checkpoint.json"))?;
            origins_from_cloud(&cp.cloud, &mut rng)?
        }
        "fit-batch" => {
            let chains: Vec<ChainOutput> = read_json(&run.join("chains.json"))?;
            origins_from_chains(&info.family, &chains)?
        }
        other => bail!(Error::Validation(format!("unknown run type `{other}`"))),
    };
    let origin_t = info.observations.len().saturating_sub(1);
    let f = &cfg.forecast;
    let res = predict(&info.family, &origins, origin_t, f.horizon, f.aggregation, f.draws, &mut rng)?;
    std::fs::create_dir_all(&common.out)?;
    csv_out(&common.out.join("forecast.csv"), &mut rec, |w| write_forecast_csv(&[res], w))?;
    rec.finish(&common.out)
}

fn read_pl_pred(run: &Path, label: &str) -> Result<PlSeries> {
    let path = run.join("pl.csv");
    let mut rdr = csv::Reader::from_path(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut start = None;
    let mut values = vec![];
    for r in rdr.records() {
        let r = r?;
        let bad = |c: &str| Error::Schema {
            file: path.display().to_string(),
            row: values.len() + 2,
            column: c.into(),
            reason: "not a number".into(),
        };
        let t: usize = r.get(0).unwrap_or("").parse().map_err(|_| bad("t"))?;
        start.get_or_insert(t);
        values.push(r.get(2).unwrap_or("").parse::<f64>().map_err(|_| bad("log_pl_pred"))?);
    }
    Ok(PlSeries {
        label: label.into(),
        start: start.unwrap_or(0),
        values,
    })
}

fn run_label(run: &Path) -> String {
    run.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| run.display().to_string())
}

/// `DIR` or `LABEL=DIR[,DIR…]`; runs sharing a label form one model row.
fn parse_run_spec(spec: &Path) -> (String, Vec<PathBuf>) {
    let text = spec.to_string_lossy();
    match text.split_once('=') {
        Some((label, dirs)) if !label.is_empty() => {
            (label.to_string(), dirs.split(',').map(PathBuf::from).collect())
        }
        _ => (run_label(spec), vec![spec.to_path_buf()]),
    }
}

fn merge_report(into: &mut CriterionReport, other: CriterionReport, label: &str) -> Result<()> {
    let clash = |what: &str| Error::Validation(format!("model `{label}` has {what} from more than one run"));
    if let Some(d) = other.dic {
        if into.dic.replace(d).is_some() {
            bail!(clash("DIC"));
        }
    }
    if let Some(w) = other.waic {
        if into.waic.replace(w).is_some() {
            bail!(clash("WAIC"));
        }
    }
    if let Some(p) = other.pl {
        if into.pl.replace(p).is_some() {
            bail!(clash("a predictive-likelihood series"));
        }
    }
    Ok(())
}

fn cmd_compare(runs: &[PathBuf], estimator: EstimatorArg, out: &Path) -> Result<()> {
    let specs: Vec<(String, Vec<PathBuf>)> = runs.iter().map(|r| parse_run_spec(r)).collect();
    let mut labels: Vec<String> = vec![];
    let mut reports: Vec<CriterionReport> = vec![];
    for (label, dirs) in &specs {
        for run in dirs {
            let mut r: CriterionReport = read_json(&run.join("criteria.json"))?;
            if let Some(pl) = &mut r.pl {
                pl.label = label.clone();
                if matches!(estimator, EstimatorArg::Prediction) {
                    *pl = read_pl_pred(run, label)?;
                }
            }
            match labels.iter().position(|l| l == label) {
                Some(i) => merge_report(&mut reports[i], r, label)?,
                None => {
                    r.label = label.clone();
                    labels.push(label.clone());
                    reports.push(r);
                }
            }
        }
    }
    let mut rec = Recorder::new("compare", &(&labels, format!("{estimator:?}")), 0)?;
    std::fs::create_dir_all(out)?;
    csv_out(&out.join("comparison.csv"), &mut rec, |w| write_comparison_csv(&reports, w))?;
    rec.finish(out)
}

fn cmd_diagnose(run: &Path, out: &Path) -> Result<()> {
    let mut rec = Recorder::new("diagnose", &run_label(run), 0)?;
    let info: RunInfo = read_json(&run.join("run.json"))?;
    if info.command != "fit-batch" {
        bail!(Error::Validation("diagnose needs a fit-batch run".into()));
    }
    let chains: Vec<ChainOutput> = read_json(&run.join("chains.json"))?;
    let names = info.family.cfg.layout().names();
    let rows = summary_rows(&chains, &names)?;
    std::fs::create_dir_all(out)?;
    csv_out(&out.join("diagnostics.csv"), &mut rec, |w| write_summary_csv(&rows, w))?;
    csv_out(&out.join("trace.csv"), &mut rec, |w| {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["chain", "iteration", "log_posterior", "accept_stat", "step_size", "tree_depth", "divergent", "cpf_retried"])?;
        for c in &chains {
            for i in 0..c.len() {
                let s = &c.stats[i];
                wr.write_record([
                    c.chain.to_string(),
                    i.to_string(),
                    format!("{:.17e}", c.log_posterior[i]),
                    format!("{:.6}", s.accept_stat),
                    format!("{:.6e}", s.step_size),
                    s.depth.to_string(),
                    u8::from(s.divergent).to_string(),
                    u8::from(s.cpf_retried).to_string(),
                ])?;
            }
        }
        wr.flush()?;
        Ok(())
    })?;
    let worst = rows.iter().map(|r| r.rhat).fold(f64::NAN, f64::max);
    let divergences: usize = chains
        .iter()
        .map(|c| c.retained().filter(|&i| c.stats[i].divergent).count())
        .sum();
    println!("max split-Rhat {worst:.4}; {divergences} divergent retained transitions");
    rec.finish(out)
}
