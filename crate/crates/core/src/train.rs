//! Training, evaluation and ablation runs.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::{Ablation, ModelConfig};
use crate::data::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::metrics::{confusion, ConfusionMatrix, Metrics};
use crate::model::{argmax, InputDims, ModelInput, Mstnet, Normalizer};
use crate::nn::{Ctx, ParamStore};
use crate::optim::Adam;

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
    pub loss: f64,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

/// Runs the model in inference mode over `samples`. Per-sample passes may
/// run in parallel; results keep sample order.
pub fn evaluate(net: &Mstnet, params: &ParamStore<f32>, norm: &Normalizer, samples: &[&Sample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let schema = &net.dims.schema;
    let outputs = samples
        .par_iter()
        .map(|s| {
            let input = ModelInput::<f32>::prepare(s, schema, norm)?;
            let mut ctx = Ctx::eval(params);
            let logits = net.forward(&mut ctx, &input)?;
            let loss = ctx.graph.cross_entropy(logits, s.label)?;
            let mut p = [0f32; 3];
            p.copy_from_slice(ctx.graph.value(logits).data());
            Ok((argmax(&p), ctx.graph.value(loss).data()[0] as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let predictions: Vec<usize> = outputs.iter().map(|o| o.0).collect();
    let loss = outputs.iter().map(|o| o.1).sum::<f64>() / samples.len() as f64;
    let confusion = confusion(&labels, &predictions)?;
    Ok(Evaluation {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        labels,
        predictions,
        loss,
        metrics: Metrics::from_confusion(&confusion)?,
        confusion,
    })
}

impl Checkpoint {
    pub fn evaluate(&self, samples: &[&Sample]) -> Result<Evaluation> {
        evaluate(&self.net, &self.params, &self.normalizer, samples)
    }

    /// Evaluates one split of `dataset` after checking it matches the
    /// checkpoint's input layout.
    pub fn evaluate_split(&self, dataset: &Dataset, split: Split) -> Result<Evaluation> {
        self.net.dims.check_compatible(&InputDims::of(dataset))?;
        self.evaluate(&dataset.split(split))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub loss: f64,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training cross-entropy over the epoch, with dropout active.
    pub train_loss: f64,
    pub eval: Option<EvalRecord>,
    /// Set when this epoch produced a new best eval accuracy.
    pub improved: bool,
    /// Not reproducible; kept out of `metrics.csv`.
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub config_hash: String,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,eval_loss,precision,recall,f1,accuracy,mcc";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        match &self.eval {
            Some(e) => format!("{},{:.6},{:.6},{}", self.epoch, self.train_loss, e.loss, e.metrics.csv_row()),
            None => format!("{},{:.6},,,,,,", self.epoch, self.train_loss),
        }
    }
}

impl RunLog {
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for e in &self.epochs {
            let _ = writeln!(out, "{}", e.csv_row());
        }
        out
    }
}

pub struct TrainOutcome {
    pub final_checkpoint: Checkpoint,
    /// Parameters at the best eval accuracy; `None` without an eval split.
    pub best_checkpoint: Option<Checkpoint>,
    pub log: RunLog,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

type Grads = Vec<Vec<f32>>;

fn sample_step(
    net: &Mstnet,
    params: &ParamStore<f32>,
    input: &ModelInput<f32>,
    label: usize,
    dropout: f64,
    seed: u64,
) -> Result<(f64, Grads)> {
    let mut ctx = Ctx::train(params, dropout, seed);
    let logits = net.forward(&mut ctx, input)?;
    let loss = ctx.graph.cross_entropy(logits, label)?;
    let value = ctx.graph.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    ctx.graph.backward(loss)?;
    let mut grads: Grads = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
    for (id, g) in ctx.param_grads() {
        grads[id.index()].copy_from_slice(g);
    }
    Ok((value, grads))
}

/// Live view of the model handed to the epoch callback.
pub struct EpochView<'a> {
    pub net: &'a Mstnet,
    pub params: &'a ParamStore<f32>,
    pub normalizer: &'a Normalizer,
}

impl EpochView<'_> {
    pub fn checkpoint(&self, epoch: usize) -> Checkpoint {
        Checkpoint {
            net: self.net.clone(),
            params: self.params.clone(),
            normalizer: self.normalizer.clone(),
            epoch,
        }
    }

    pub fn evaluate(&self, samples: &[&Sample]) -> Result<Evaluation> {
        evaluate(self.net, self.params, self.normalizer, samples)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Trains from scratch. `on_epoch` sees every epoch record with the
/// current parameters and may end training early.
pub fn train(
    config: &ModelConfig,
    dataset: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochRecord, &EpochView<'_>) -> Result<Control>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let dims = InputDims::of(dataset);
    let (net, mut params) = Mstnet::build::<f32>(config, &dims)?;
    let normalizer = Normalizer::fit_train(dataset)?;
    let train_set = dataset.split(Split::Train);
    let eval_set = dataset.split(Split::Eval);
    if train_set.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let inputs = train_set
        .iter()
        .map(|s| ModelInput::<f32>::prepare(s, &dims.schema, &normalizer))
        .collect::<Result<Vec<_>>>()?;
    let mut adam = Adam::new(&params, config.learning_rate, config.beta1, config.beta2, config.adam_eps);
    let batch = config.batch_size.min(train_set.len());
    let workers = rayon::current_num_threads().max(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffler = ChaCha8Rng::seed_from_u64(mix(config.seed, 0x5348_5546));

    let mut log = RunLog {
        config_hash: config.hash(),
        seed: config.seed,
        epochs: Vec::with_capacity(config.epochs),
    };
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut last = 0;
    for epoch in 0..config.epochs {
        last = epoch;
        let started = Instant::now();
        if batch < order.len() {
            order.shuffle(&mut shuffler);
        }
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch) {
            let step = adam.steps();
            let mut total: Grads = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            for group in chunk.chunks(workers) {
                let results = group
                    .par_iter()
                    .map(|&i| {
                        let seed = mix(config.seed, step.wrapping_mul(1 << 20) + i as u64 + 1);
                        sample_step(&net, &params, &inputs[i], train_set[i].label, config.dropout, seed)
                    })
                    .collect::<Result<Vec<_>>>()?;
                for (loss, grads) in results {
                    if !loss.is_finite() {
                        return Err(Error::NonFiniteLoss { step: step as usize });
                    }
                    loss_sum += loss;
                    for (t, g) in total.iter_mut().zip(&grads) {
                        for (a, b) in t.iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f32;
            for t in &mut total {
                for v in t.iter_mut() {
                    *v *= scale;
                }
            }
            adam.step(&mut params, &total);
        }
        let train_loss = loss_sum / order.len() as f64;

        let due = (epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs;
        let eval = if due && !eval_set.is_empty() {
            let e = evaluate(&net, &params, &normalizer, &eval_set)?;
            Some(EvalRecord {
                loss: e.loss,
                metrics: e.metrics,
            })
        } else {
            None
        };
        let improved = match (&eval, &best) {
            (Some(e), Some((acc, _))) => e.metrics.accuracy > *acc,
            (Some(_), None) => true,
            _ => false,
        };
        let view = EpochView {
            net: &net,
            params: &params,
            normalizer: &normalizer,
        };
        if let (true, Some(e)) = (improved, &eval) {
            best = Some((e.metrics.accuracy, view.checkpoint(epoch)));
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            eval,
            improved,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        let control = on_epoch(&record, &view)?;
        log.epochs.push(record);
        if control == Control::Stop {
            break;
        }
    }
    Ok(TrainOutcome {
        final_checkpoint: Checkpoint {
            net,
            params,
            normalizer,
            epoch: last,
        },
        best_checkpoint: best.map(|b| b.1),
        log,
    })
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Trains and writes a run directory: `config.toml`, `metrics.csv`,
/// `log.txt`, `best.ckpt` and `final.ckpt`.
pub fn train_run(
    config: &ModelConfig,
    dataset: &Dataset,
    run_dir: &Path,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let cfg_path = run_dir.join("config.toml");
    fs::write(&cfg_path, config.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let metrics_path = run_dir.join("metrics.csv");
    fs::write(&metrics_path, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&metrics_path, e))?;
    let log_path = run_dir.join("log.txt");
    fs::write(
        &log_path,
        format!("config_hash {}\nseed {}\n", config.hash(), config.seed),
    )
    .map_err(|e| Error::io(&log_path, e))?;
    let best_path = run_dir.join("best.ckpt");

    let outcome = train(config, dataset, &mut |rec, view| {
        append_line(&metrics_path, &rec.csv_row())?;
        let acc = rec
            .eval
            .as_ref()
            .map(|e| format!(" eval_acc {:.4}", e.metrics.accuracy))
            .unwrap_or_default();
        append_line(
            &log_path,
            &format!("epoch {} train_loss {:.6}{acc} wall {:.3}s", rec.epoch, rec.train_loss, rec.wall_seconds),
        )?;
        if rec.improved {
            view.checkpoint(rec.epoch).save(&best_path)?;
        }
        progress(rec);
        Ok(Control::Continue)
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            let _ = append_line(&log_path, &format!("aborted: {e}"));
            return Err(e);
        }
    };
    outcome.final_checkpoint.save(&run_dir.join("final.ckpt"))?;
    if outcome.best_checkpoint.is_none() {
        outcome.final_checkpoint.save(&best_path)?;
    }
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub config_hash: String,
    pub trainable_params: usize,
    /// Final-epoch metrics on the eval split.
    pub metrics: Metrics,
}

/// Trains the four ablations and the full model on the same seed, each in
/// its own run directory under `root`.
pub fn ablate(
    base: &ModelConfig,
    dataset: &Dataset,
    root: &Path,
    progress: &mut dyn FnMut(Ablation, &EpochRecord),
) -> Result<Vec<AblationRow>> {
    let eval_set = dataset.split(Split::Eval);
    if eval_set.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let mut rows = Vec::with_capacity(Ablation::ALL.len());
    for ab in Ablation::ALL {
        let cfg = ab.apply(base);
        let outcome = train_run(&cfg, dataset, &root.join(ab.slug()), &mut |r| progress(ab, r))?;
        let ckpt = &outcome.final_checkpoint;
        rows.push(AblationRow {
            ablation: ab,
            config_hash: cfg.hash(),
            trainable_params: ckpt.params.num_trainable(),
            metrics: ckpt.evaluate(&eval_set)?.metrics,
        });
    }
    let table = root.join("ablation.csv");
    fs::write(&table, ablation_csv(&rows)).map_err(|e| Error::io(&table, e))?;
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("method,config_hash,trainable_params,{}\n", Metrics::CSV_HEADER);
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.ablation.slug(),
            r.config_hash,
            r.trainable_params,
            r.metrics.csv_row()
        );
    }
    out
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<20} {:>9} {:>9} {:>9} {:>9} {:>9} {:>8}\n",
        "Method", "Precision", "Recall", "F1", "Accuracy", "MCC", "Params"
    );
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{:<20} {:>9.2} {:>9.2} {:>9.2} {:>9.2} {:>9.2} {:>8}",
            r.ablation.label(),
            100.0 * m.precision,
            100.0 * m.recall,
            100.0 * m.f1,
            100.0 * m.accuracy,
            100.0 * m.mcc,
            r.trainable_params
        );
    }
    out
}
