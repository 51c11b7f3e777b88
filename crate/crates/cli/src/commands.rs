use mfil::analysis::{
    emit_report, intermediate_mse_profile, locality_score, mean_pairwise_mse, pairwise_reconstruction_divergence,
    parameter_budget, stage_mse_profile, ReportInput, ReportRow, Table, TokenManipulation,
};
use mfil::data_io::{load_checkpoint, save_checkpoint, write_csv, Sample};
use mfil::inversion::{
    evaluate_tradeoff, finetune_tradeoff, pair_mse, reconstruct, ActivationCache, InverseComponent, TradeoffConfig,
    Variant,
};
use mfil::model_zoo::{detections_from_pred, Component, ForwardModel, Stage};
use mfil::Tensor64;

use crate::pipeline::{fmt_f64, Pipeline, Result};

fn save_table(p: &Pipeline, dir: &str, t: &Table) -> Result<()> {
    let header: Vec<&str> = t.header.iter().map(String::as_str).collect();
    write_csv(&p.path(&[dir, &format!("{}.csv", t.name)])?, &header, &t.rows)?;
    Ok(())
}

fn print_table(t: &Table) {
    println!("{}", t.header.join(","));
    for r in &t.rows {
        println!("{}", r.join(","));
    }
}

fn finish(p: &Pipeline, dir: &str, t: Table) -> Result<Table> {
    save_table(p, dir, &t)?;
    print_table(&t);
    Ok(t)
}

pub fn gen_data(p: &mut Pipeline) -> Result<()> {
    let d = p.ensure_data()?;
    println!("train={} val={} test={}", d.train.len(), d.val.len(), d.test.len());
    Ok(())
}

pub fn train_forward(p: &mut Pipeline) -> Result<()> {
    p.ensure_forward()?;
    let metric = mfil::model_zoo::evaluate_task(p.model(), p.eval_set())?;
    println!("parameters={} test_metric={}", p.model().parameter_count(), fmt_f64(metric));
    Ok(())
}

/// Trains every configured instance of the selected inverses and reports
/// their test error in their own target space.
pub fn train_inverse(p: &mut Pipeline, stage: Option<Stage>, variant: Option<Variant>, full_path: bool) -> Result<Table> {
    p.ensure_forward()?;
    let stages = stage.map_or_else(|| p.config.model.stages().to_vec(), |s| vec![s]);
    let test = ActivationCache::build(p.model(), p.eval_set())?;
    let mut rows = Vec::new();
    for s in stages {
        for k in 0..p.config.inverse_instances {
            let (c, label) = if full_path {
                (p.ensure_full_path(s, k)?, "full_path".to_string())
            } else {
                let v = variant.unwrap_or_else(|| p.config.variant(s));
                let c = p.ensure_inverse(s, v, k)?;
                let label = c.variant().to_string();
                (c, label)
            };
            let mse = pair_mse(&c, &test.pairs(s, c.spec.target)?)?;
            rows.push(vec![s.to_string(), label, k.to_string(), c.parameter_count().to_string(), fmt_f64(mse)]);
        }
    }
    let header = ["stage", "variant", "instance", "parameters", "test_mse"];
    let name = if full_path { "full_path" } else { "modular" };
    finish(p, "train_inverse", Table { name: name.into(), header: header.map(String::from).to_vec(), rows })
}

fn lambda_tag(l: f64) -> String {
    format!("lambda{l:.3}")
}

pub fn finetune(p: &mut Pipeline, lambda: Option<f64>) -> Result<Table> {
    p.ensure_forward()?;
    let lambdas = lambda.map_or_else(|| p.config.lambdas.clone(), |l| vec![l]);
    if let Some(l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(crate::error::CliError::Usage(format!("lambda {l} outside [0, 1]")));
    }
    let stage = p.config.tradeoff_stage();
    let mut rows = Vec::new();
    for &l in &lambdas {
        for k in 0..p.config.inverse_instances {
            let tag = format!("{}-{k}", lambda_tag(l));
            let model_path = p.path(&["finetune", &tag, "forward.ckpt"])?;
            let inv_path = p.path(&["finetune", &tag, "inverse.ckpt"])?;
            let (model, inverse) = if model_path.exists() && inv_path.exists() {
                (
                    ForwardModel::from_checkpoint(&load_checkpoint(&model_path)?)?,
                    InverseComponent::from_checkpoint(&load_checkpoint(&inv_path)?)?,
                )
            } else {
                eprintln!("fine-tuning {tag}");
                let seed = p.seed("tradeoff", k as u64);
                let start = InverseComponent::full_path(&p.config.model, stage, p.seed("tradeoff-inverse", k as u64))?;
                let cfg = TradeoffConfig { lambda: l, stage, schedule: p.config.tradeoff.clone(), seed };
                let r = finetune_tradeoff(p.model(), &start, &cfg, &p.data().train, &p.data().val)?;
                let curve: Vec<Vec<String>> = r
                    .epochs
                    .iter()
                    .map(|e| {
                        vec![
                            e.epoch.to_string(),
                            fmt_f64(e.train_total),
                            fmt_f64(e.train_mse),
                            fmt_f64(e.train_obj),
                            fmt_f64(e.val_metric),
                            fmt_f64(e.val_mse),
                        ]
                    })
                    .collect();
                write_csv(
                    &p.path(&["finetune", &tag, "curve.csv"])?,
                    &["epoch", "train_total", "train_mse", "train_obj", "val_metric", "val_mse"],
                    &curve,
                )?;
                save_checkpoint(&model_path, &r.model.to_checkpoint()?)?;
                save_checkpoint(&inv_path, &r.inverse.to_checkpoint()?)?;
                (r.model, r.inverse)
            };
            let (metric, mse) = evaluate_tradeoff(&model, &inverse, stage, p.eval_set())?;
            rows.push(vec![format!("{l}"), k.to_string(), fmt_f64(metric), fmt_f64(mse)]);
        }
    }
    let header = ["lambda", "instance", "test_metric", "test_mse"];
    finish(p, "finetune", Table { name: "tradeoff".into(), header: header.map(String::from).to_vec(), rows })
}

/// Per-instance and mean stage MSE, plus the mean-image baseline.
pub fn profile(p: &mut Pipeline) -> Result<Table> {
    p.ensure_forward()?;
    let stages = p.config.stages();
    let mut rows = Vec::new();
    let mut sums = vec![0.0; stages.len()];
    let mut baseline = 0.0;
    let n = p.config.inverse_instances;
    for k in 0..n {
        let stack = p.ensure_stack(k)?;
        let prof = stage_mse_profile(p.model(), &stack, &p.data().train, p.eval_set())?;
        for (i, &s) in stages.iter().enumerate() {
            let v = prof.get(s).expect("stage in plan");
            sums[i] += v;
            rows.push(vec![k.to_string(), s.to_string(), fmt_f64(v)]);
        }
        baseline = prof.baseline;
    }
    for (i, s) in stages.iter().enumerate() {
        rows.push(vec!["mean".into(), s.to_string(), fmt_f64(sums[i] / n as f64)]);
    }
    rows.push(vec!["baseline".into(), "mean_image".into(), fmt_f64(baseline)]);
    let header = ["instance", "stage", "mse"];
    finish(p, "profile", Table { name: "stage_profile".into(), header: header.map(String::from).to_vec(), rows })
}

/// Mean pairwise divergence of color-filtered inputs and of their
/// reconstructions from every configured stage.
pub fn perturb_color(p: &mut Pipeline, stage: Option<Stage>) -> Result<Table> {
    p.ensure_forward()?;
    let stack = p.ensure_stack(0)?;
    let filters = p.config.filters.clone();
    let mut targets: Vec<Option<Stage>> = vec![None];
    targets.extend(stage.map_or_else(|| p.config.stages(), |s| vec![s]).into_iter().map(Some));
    let samples = p.eval_set();
    let mut rows = Vec::new();
    for t in targets {
        let mut sum = 0.0;
        for s in samples {
            let mask = s.object_mask();
            sum += pairwise_reconstruction_divergence(&s.image, &mask, &filters, p.model(), &stack, t)?;
        }
        let label = t.map_or("input".to_string(), |s| s.to_string());
        rows.push(vec![label, fmt_f64(sum / samples.len() as f64)]);
    }
    let header = ["source", "divergence"];
    finish(p, "perturb_color", Table { name: "divergence".into(), header: header.map(String::from).to_vec(), rows })
}

pub fn perturb_tokens(p: &mut Pipeline, stage: Option<Stage>, variant: Option<Variant>) -> Result<Table> {
    p.ensure_forward()?;
    let mut stack = p.ensure_stack(0)?;
    if let Some(v) = variant {
        stack = stack.with_component(p.ensure_inverse(Stage::Bb, v, 0)?)?;
    }
    let t = &p.config.tokens;
    let stage = stage.unwrap_or(t.stage);
    let m = TokenManipulation {
        stage,
        fraction: t.fraction,
        add_positional: t.add_positional && stage == Stage::Bb,
        seed: p.seed("tokens", 0),
    };
    let score = locality_score(p.model(), &stack, &m, p.eval_set())?;
    let bb = stack.get(Stage::Bb).expect("full stack").variant();
    let rows = vec![vec![
        stage.to_string(),
        bb.to_string(),
        fmt_f64(score.manipulated_mse),
        fmt_f64(score.untouched_mse),
        fmt_f64(score.ratio()),
        fmt_f64(score.max_manipulated_pair_mse),
    ]];
    let header = ["stage", "bb_variant", "manipulated_mse", "untouched_mse", "ratio", "max_manipulated_pair_mse"];
    finish(p, "perturb_tokens", Table { name: "locality".into(), header: header.map(String::from).to_vec(), rows })
}

pub fn invert_intermediate(p: &mut Pipeline) -> Result<Table> {
    p.ensure_forward()?;
    let stack = p.ensure_stack(0)?;
    let mut rows = Vec::new();
    let mut components = vec![Component::Encoder];
    if p.config.model.has_stage(Stage::Dec) {
        components.push(Component::Decoder);
    }
    for c in components {
        let prof = intermediate_mse_profile(p.model(), c, &stack, p.eval_set())?;
        let name = match c {
            Component::Encoder => "encoder",
            Component::Decoder => "decoder",
        };
        for (l, v) in prof.iter().enumerate() {
            rows.push(vec![name.to_string(), l.to_string(), fmt_f64(*v)]);
        }
    }
    let header = ["component", "layer", "mse"];
    finish(p, "invert_intermediate", Table { name: "layers".into(), header: header.map(String::from).to_vec(), rows })
}

pub fn budget(n: u64, params: u64) -> Result<()> {
    println!("{}", parameter_budget(n, params)?);
    Ok(())
}

fn report_rows(p: &mut Pipeline, stage: Option<Stage>) -> Result<(Vec<ReportRow<f64>>, Vec<(String, f64)>)> {
    p.ensure_forward()?;
    let stack = p.ensure_stack(0)?;
    let stages = stage.map_or_else(|| p.config.stages(), |s| vec![s]);
    let take = p.config.report_samples.min(p.eval_set().len());
    let samples: Vec<Sample<f64>> = p.eval_set()[..take].to_vec();
    let mut rows = Vec::with_capacity(take);
    let mut sums = vec![0.0; stages.len()];
    for s in &samples {
        let (acts, _) = p.model().forward(&s.image)?;
        let mut recon: Vec<(String, Tensor64)> = Vec::with_capacity(stages.len());
        for (i, &st) in stages.iter().enumerate() {
            let r = reconstruct(&stack, &acts, st)?;
            sums[i] += r.image.mse(&s.image)?;
            recon.push((st.to_string(), r.image));
        }
        let pred_boxes = acts
            .pred
            .as_ref()
            .map(|pred| {
                detections_from_pred(pred)
                    .into_iter()
                    .filter(|d| d.class() < p.config.model.classes)
                    .map(|d| d.bbox)
                    .collect()
            })
            .unwrap_or_default();
        rows.push(ReportRow {
            id: s.id,
            input: s.image.clone(),
            reconstructions: recon,
            gt_boxes: s.objects().iter().map(|o| o.bbox).collect(),
            pred_boxes,
        });
    }
    let n = samples.len().max(1) as f64;
    Ok((rows, stages.iter().zip(sums).map(|(s, v)| (s.to_string(), v / n)).collect()))
}

fn write_report(p: &mut Pipeline, dir: &str, stage: Option<Stage>, tables: Vec<Table>) -> Result<()> {
    let (rows, stage_mse) = report_rows(p, stage)?;
    let out = p.path(&[dir, "report.json"])?;
    let out = out.parent().expect("has parent");
    let input = ReportInput {
        experiment: p.config.experiment.clone(),
        config: serde_json::to_string_pretty(&p.config).map_err(|e| crate::error::CliError::Other(e.to_string()))?,
        seeds: vec![p.config.seed],
        stage_mse,
        rows,
        tables,
    };
    let report = emit_report(out, &input)?;
    println!("report={} images={} tables={}", out.display(), report.images.len(), report.tables.len());
    Ok(())
}

pub fn reconstruct_cmd(p: &mut Pipeline, stage: Option<Stage>) -> Result<()> {
    write_report(p, "reconstruct", stage, vec![])
}

/// Runs every analysis and collects its tables into one report.
pub fn report(p: &mut Pipeline) -> Result<()> {
    let mut tables = vec![profile(p)?];
    tables.push(train_inverse(p, None, None, false)?);
    tables.push(perturb_color(p, None)?);
    tables.push(perturb_tokens(p, None, None)?);
    tables.push(invert_intermediate(p)?);
    if !p.config.lambdas.is_empty() {
        tables.push(finetune(p, None)?);
    }
    let test = p.eval_set();
    if test.len() >= 2 {
        let imgs: Vec<Tensor64> = test.iter().map(|s| s.image.clone()).collect();
        let rows = vec![vec![fmt_f64(mean_pairwise_mse(&imgs)?)]];
        tables.push(Table { name: "test_pairwise_mse".into(), header: vec!["mse".into()], rows });
    }
    write_report(p, "report", None, tables)
}
