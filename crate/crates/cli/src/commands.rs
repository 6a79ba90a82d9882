use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use crossmodal::data::{generate_synthetic, load_dataset, write_dataset, Dataset, Splits};
use crossmodal::eval::{embed_dataset, retrieval_matrix, retrieve as nearest, EmbeddingTable};
use crossmodal::model::Model;
use crossmodal::train::{run_training, write_history, Budget};
use crossmodal::Scalar;

use crate::config::{Precision, RunConfig, Split};
use crate::{Common, Scoring, Source};

macro_rules! dispatch {
    ($precision:expr, $f:ident($($arg:expr),*)) => {
        match $precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

pub struct TrainOverrides {
    pub loss: Option<String>,
    pub iterations: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
}

pub struct Query {
    pub id: usize,
    pub source: String,
    pub target: String,
    pub top_n: usize,
}

fn resolve(common: &Common, edit: impl FnOnce(&mut RunConfig) -> Result<()>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(p) = common.precision {
        cfg.precision = p;
    }
    edit(&mut cfg)?;
    cfg.validate()?;
    cfg.snapshot(&common.out_dir)?;
    Ok(cfg)
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).with_context(|| format!("cannot write {}", path.display()))
}

fn splits<T: Scalar>(source: &Source, cfg: &RunConfig) -> Result<Splits<T>> {
    Ok(match &source.dataset {
        Some(path) => load_dataset(path)?,
        None => generate_synthetic(&cfg.data)?,
    })
}

fn pick<T>(splits: Splits<T>, split: Split) -> Dataset<T> {
    match split {
        Split::Train => splits.train,
        Split::Test => splits.test,
    }
}

pub fn gen_data(common: &Common, seed: Option<u64>) -> Result<()> {
    let cfg = resolve(common, |c| {
        if let Some(s) = seed {
            c.data.seed = s;
        }
        Ok(())
    })?;
    dispatch!(cfg.precision, gen_data_as(&cfg, &common.out_dir))
}

fn gen_data_as<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<()> {
    let splits = generate_synthetic::<T>(&cfg.data)?;
    let manifest = write_dataset(out, &splits)?;
    println!(
        "wrote {} train / {} test instances to {}",
        splits.train.len(),
        splits.test.len(),
        manifest.display()
    );
    Ok(())
}

pub fn train(common: &Common, source: &Source, o: TrainOverrides) -> Result<()> {
    let cfg = resolve(common, |c| {
        if let Some(spec) = &o.loss {
            c.train.weights = c.train.weights.ablation(spec)?;
        }
        if let Some(it) = o.iterations {
            c.train.budget = Budget::Iterations(it);
        }
        if let Some(e) = o.epochs {
            c.train.budget = Budget::Epochs(e);
        }
        if let Some(b) = o.batch_size {
            c.train.batch_size = b;
        }
        if let Some(s) = o.seed {
            c.train.seed = s;
        }
        Ok(())
    })?;
    dispatch!(cfg.precision, train_as(&cfg, source, &common.out_dir))
}

fn train_as<T: Scalar>(cfg: &RunConfig, source: &Source, out: &Path) -> Result<()> {
    let train = splits::<T>(source, cfg)?.train;
    let outcome = run_training(&train, cfg.model, &cfg.train)?;
    outcome.model.save(&out.join("checkpoint.json"))?;
    outcome.bank.save(&out.join("centers.txt"))?;
    write_history(&out.join("loss_history.csv"), &outcome.history)?;
    match (outcome.history.first(), outcome.history.last()) {
        (Some(first), Some(last)) => println!(
            "{} iterations, loss {:.6} -> {:.6} (L_c {:.6}, L_d {:.6}, L_m {:.6})",
            outcome.history.len(),
            first.metrics.total,
            last.metrics.total,
            last.metrics.center,
            last.metrics.disc,
            last.metrics.mse
        ),
        _ => println!("0 iterations, model left at its initialization"),
    }
    Ok(())
}

fn scoring_config(common: &Common, scoring: &Scoring, r: Option<usize>) -> Result<RunConfig> {
    resolve(common, |c| {
        if let Some(s) = scoring.split {
            c.eval.split = s;
        }
        if scoring.raw {
            c.eval.normalize = false;
        }
        if r.is_some() {
            c.eval.r = r;
        }
        Ok(())
    })
}

fn table<T: Scalar>(cfg: &RunConfig, source: &Source, scoring: &Scoring) -> Result<EmbeddingTable<T>> {
    let model = Model::<T>::load(&scoring.checkpoint)?;
    let data = pick(splits::<T>(source, cfg)?, cfg.eval.split);
    Ok(embed_dataset(&data, &model, cfg.eval.normalize)?)
}

pub fn embed(common: &Common, source: &Source, scoring: &Scoring) -> Result<()> {
    let cfg = scoring_config(common, scoring, None)?;
    dispatch!(cfg.precision, embed_as(&cfg, source, scoring, &common.out_dir))
}

fn embed_as<T: Scalar>(cfg: &RunConfig, source: &Source, scoring: &Scoring, out: &Path) -> Result<()> {
    let table = table::<T>(cfg, source, scoring)?;
    let path = out.join("embeddings.csv");
    write(&path, &table.to_csv())?;
    println!("wrote {} embeddings to {}", table.len(), path.display());
    Ok(())
}

pub fn eval(common: &Common, source: &Source, scoring: &Scoring, r: Option<usize>) -> Result<()> {
    let cfg = scoring_config(common, scoring, r)?;
    dispatch!(cfg.precision, eval_as(&cfg, source, scoring, &common.out_dir))
}

fn eval_as<T: Scalar>(cfg: &RunConfig, source: &Source, scoring: &Scoring, out: &Path) -> Result<()> {
    let table = table::<T>(cfg, source, scoring)?;
    let report = retrieval_matrix(&table, cfg.eval.r, cfg.eval.exclude_self)?;
    report.write(out)?;
    print!("{}", report.table());
    println!("mean cross-modal mAP {:.4}", report.mean_cross_modal());
    Ok(())
}

pub fn retrieve(common: &Common, source: &Source, scoring: &Scoring, query: Query) -> Result<()> {
    let cfg = scoring_config(common, scoring, None)?;
    dispatch!(
        cfg.precision,
        retrieve_as(&cfg, source, scoring, &query, &common.out_dir)
    )
}

fn retrieve_as<T: Scalar>(cfg: &RunConfig, source: &Source, scoring: &Scoring, q: &Query, out: &Path) -> Result<()> {
    let table = table::<T>(cfg, source, scoring)?;
    let hits = nearest(&table, q.id, &q.source, &q.target, q.top_n, cfg.eval.exclude_self)?;
    let mut body = String::from("rank,instance_id,label,distance,relevant\n");
    for (rank, h) in hits.iter().enumerate() {
        body.push_str(&format!(
            "{},{},{},{},{}\n",
            rank + 1,
            h.instance_id,
            h.label,
            h.distance,
            h.relevant
        ));
    }
    write(&out.join("retrieval.csv"), &body)?;
    print!("{body}");
    Ok(())
}
