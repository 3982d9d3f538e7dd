use std::collections::BTreeMap;

use serde::Serialize;
use survmix::checkpoint::{file_hash, load_checkpoint, save_checkpoint};
use survmix::dataio::{cohort_summary, load_cohort_dir, simulate_cohort, split_cohort, write_cohort, Cohort};
use survmix::effects::{
    default_horizon, latent_export, latent_spaces, profile_subgroups, BaselineStratum, LatentSpace, ResponseGroup,
    HOPKINS_CONVENTION,
};
use survmix::error::{Error, Result};
use survmix::metrics::EvaluationReport;
use survmix::numerics::derive_seed;
use survmix::pipeline::{evaluate_model, prepare, PreparedData};
use survmix::survival::{train, InputDims, ModelBatch, SearchResult, SurvivalModel};

use crate::config::{RunConfig, Subset};
use crate::output::{csv_writer, write_json};

fn load_cohort(cfg: &RunConfig) -> Result<Cohort> {
    load_cohort_dir(cfg.data_dir()?, &cfg.preprocess.categorical_columns())
}

pub fn simulate(cfg: &RunConfig) -> Result<()> {
    let (cohort, truth) = simulate_cohort(&cfg.simulation)?;
    write_cohort(&cohort, &cfg.out)?;
    truth.write_csv(&cfg.out.join("truth.csv"))?;
    let summary = cohort_summary(&cohort);
    write_json(&cfg.out.join("summary.json"), &summary)?;
    println!(
        "simulated n={} events={} censor_rate={:.4} -> {}",
        summary["n"],
        summary["events"],
        summary["censor_rate"],
        cfg.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainMetrics<'a> {
    config_hash: String,
    checkpoint_sha256: String,
    k_groups: usize,
    m_groups: usize,
    best_phase1_epoch: Option<usize>,
    validation_nll: f64,
    search: &'a [SearchResult],
    validation: EvaluationReport,
}

pub fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let cohort = load_cohort(cfg)?;
    let data: PreparedData<f64> = prepare(&cohort, &cfg.preprocess, &cfg.data.split, cfg.seed)?;
    let trained = train(&data.splits[0], &data.splits[1], &cfg.model, &cfg.train)?;
    let hash = cfg.fingerprint()?;
    let ckpt = cfg.out.join("model.ckpt");
    save_checkpoint(&ckpt, &trained.model, &data.preprocess, &hash)?;
    let (validation, _) = evaluate_model(&trained.model, &data.splits[1])?;

    let mut w = csv_writer(&cfg.out.join("losses.csv"))?;
    w.write_record(["phase", "epoch", "train_loss", "validation_loss"])?;
    for l in &trained.report.losses {
        w.write_record([
            l.phase.to_string(),
            l.epoch.to_string(),
            l.train.to_string(),
            l.validation.to_string(),
        ])?;
    }
    w.flush()?;

    let report = &trained.report;
    let metrics = TrainMetrics {
        config_hash: hash,
        checkpoint_sha256: file_hash(&ckpt)?,
        k_groups: report.k_groups,
        m_groups: report.m_groups,
        best_phase1_epoch: report.best_phase1_epoch,
        validation_nll: report.validation_nll,
        search: &report.search,
        validation,
    };
    write_json(&cfg.out.join("metrics.json"), &metrics)?;
    write_json(&cfg.out.join("run_config.json"), cfg)?;
    println!(
        "trained K={} M={}: validation C^td={:.4} IBS={:.4} -> {}",
        metrics.k_groups,
        metrics.m_groups,
        metrics.validation.ctd,
        metrics.validation.ibs,
        ckpt.display()
    );
    Ok(())
}

/// Checkpoint plus the configured patients, preprocessed with the stored fit.
fn scoring_inputs(cfg: &RunConfig) -> Result<(SurvivalModel<f64>, ModelBatch<f64>)> {
    let ckpt = load_checkpoint::<f64>(&cfg.checkpoint_path())?;
    let cohort = load_cohort(cfg)?;
    let processed = ckpt.preprocess.apply(&cohort)?;
    ckpt.manifest.dims.check_matches(&InputDims::of(&processed)?)?;
    let processed = match cfg.data.subset {
        Subset::All => processed,
        subset => {
            let index = match subset {
                Subset::Train => 0,
                Subset::Validation => 1,
                _ => 2,
            };
            let masks = split_cohort(&cohort, &cfg.data.split, derive_seed(cfg.seed, "split"))?;
            let mask = masks
                .get(index)
                .ok_or_else(|| Error::Config(format!("data.split has no entry for subset {subset:?}")))?;
            processed.subset_mask(mask)
        }
    };
    if processed.is_empty() {
        return Err(Error::InvalidInput("no patients to score".into()));
    }
    Ok((ckpt.model, ModelBatch::from_processed(&processed)?))
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let (model, batch) = scoring_inputs(cfg)?;
    let (report, _) = evaluate_model(&model, &batch)?;
    write_json(&cfg.out.join("evaluation.json"), &report)?;

    let mut w = csv_writer(&cfg.out.join("brier.csv"))?;
    w.write_record(["t", "brier"])?;
    for p in &report.brier {
        w.write_record([p.t.to_string(), p.brier.to_string()])?;
    }
    w.flush()?;

    let grid: Vec<f64> = report.brier.iter().map(|p| p.t).collect();
    let curves = model.curves(&batch, &grid, None)?;
    let mut w = csv_writer(&cfg.out.join("curves.csv"))?;
    w.write_record(["id", "t", "S_hat"])?;
    for (i, id) in batch.ids.iter().enumerate() {
        for (j, t) in grid.iter().enumerate() {
            w.write_record([id.clone(), t.to_string(), curves.values[i][j].to_string()])?;
        }
    }
    w.flush()?;
    println!("evaluated n={}: C^td={:.4} IBS={:.4}", report.n, report.ctd, report.ibs);
    Ok(())
}

pub fn predict(cfg: &RunConfig) -> Result<()> {
    let (model, batch) = scoring_inputs(cfg)?;
    let times = model.head.grid.points();
    let factual = model.curves(&batch, &times, None)?;
    let counterfactual = cfg
        .predict
        .treatment
        .map(|a| model.curves(&batch, &times, Some(a)).map(|c| (a, c)))
        .transpose()?;

    let mut w = csv_writer(&cfg.out.join("predictions.csv"))?;
    w.write_record(["id", "a", "t", "S_hat"])?;
    let mut rows = 0usize;
    for (i, id) in batch.ids.iter().enumerate() {
        let own = batch.treatments[i];
        let mut arms = vec![(own, &factual.values[i])];
        if let Some((a, c)) = &counterfactual {
            if *a != own {
                arms.push((*a, &c.values[i]));
            }
        }
        arms.sort_by_key(|(a, _)| *a);
        for (a, values) in arms {
            for (t, s) in times.iter().zip(values) {
                w.write_record([id.clone(), a.to_string(), t.to_string(), s.to_string()])?;
                rows += 1;
            }
        }
    }
    w.flush()?;
    println!("wrote {rows} prediction rows for {} patients", batch.len());
    Ok(())
}

#[derive(Serialize)]
struct PhenotypeReport<'a> {
    horizon: f64,
    tiers_distinguishable: bool,
    response_groups: &'a [ResponseGroup],
    baseline_strata: &'a [BaselineStratum],
}

pub fn phenotype(cfg: &RunConfig) -> Result<()> {
    let (model, batch) = scoring_inputs(cfg)?;
    let patients = model.patients(&batch)?;
    let horizon = match cfg.effects.horizon {
        Some(h) => h,
        None => default_horizon(&batch.times)?,
    };
    let report = profile_subgroups(
        &batch.ids,
        &model.hazard_table(),
        &patients,
        horizon,
        cfg.effects.subdivisions,
    )?;
    write_json(
        &cfg.out.join("phenotype.json"),
        &PhenotypeReport {
            horizon: report.horizon,
            tiers_distinguishable: report.tiers_distinguishable,
            response_groups: &report.response_groups,
            baseline_strata: &report.baseline_strata,
        },
    )?;
    let mut w = csv_writer(&cfg.out.join("phenotype.csv"))?;
    w.write_record(["id", "k_hat", "m_hat", "risk_diff"])?;
    for p in &report.patients {
        w.write_record([
            p.id.clone(),
            p.k_hat.to_string(),
            p.m_hat.to_string(),
            p.risk_diff.to_string(),
        ])?;
    }
    w.flush()?;
    for g in &report.response_groups {
        match g.effect {
            Some(e) => println!(
                "response group {}: n={} effect={e:.4} tier={}",
                g.group, g.count, g.tier
            ),
            None => println!("response group {}: empty", g.group),
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct SpaceSummary {
    space: LatentSpace,
    explained: [f64; 2],
    hopkins: Option<f64>,
}

#[derive(Serialize)]
struct EmbedSidecar {
    hopkins_convention: &'static str,
    spaces: Vec<SpaceSummary>,
}

pub fn embed(cfg: &RunConfig) -> Result<()> {
    let (model, batch) = scoring_inputs(cfg)?;
    let x = model.representation(&batch)?;
    let patients = model.patients_from_representation(&x)?;
    let mut w = csv_writer(&cfg.out.join("embed.csv"))?;
    w.write_record(["id", "space", "pc1", "pc2"])?;
    let mut spaces = Vec::new();
    for (space, points) in latent_spaces(&x, &patients)? {
        let seed = derive_seed(cfg.seed, &format!("embed-{}", space.tag()));
        let export = latent_export(space, &points, cfg.effects.hopkins_fraction, seed)?;
        for (id, c) in batch.ids.iter().zip(&export.coords) {
            w.write_record([id.clone(), space.tag().to_string(), c[0].to_string(), c[1].to_string()])?;
        }
        spaces.push(SpaceSummary {
            space,
            explained: export.explained,
            hopkins: export.hopkins,
        });
    }
    w.flush()?;
    let hopkins: BTreeMap<&str, Option<f64>> = spaces.iter().map(|s| (s.space.tag(), s.hopkins)).collect();
    write_json(
        &cfg.out.join("embed.json"),
        &EmbedSidecar {
            hopkins_convention: HOPKINS_CONVENTION,
            spaces,
        },
    )?;
    println!("embedded {} patients; Hopkins {hopkins:?}", batch.len());
    Ok(())
}
