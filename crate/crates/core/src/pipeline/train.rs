use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use rand::seq::SliceRandom;

use crate::embed::{FeatureStack, Origin};
use crate::error::{Error, Result};
use crate::numeric::{AdamConfig, Graph, Real};
use crate::objectives::{rec_loss, total_loss, LossReport};
use crate::pipeline::config::RunConfig;
use crate::pipeline::model::Model;
use crate::raster::Image;
use crate::rng::{self, derive_seed, tag};
use crate::synth::{synthesize_random, SynthPair, TextureBank};

pub const LOG_HEADER: &str = "step,l_rec,l_focal,l_dice,l_ref,l_total";

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome<T: Real> {
    pub model: Model<T>,
    /// One averaged report per optimizer step.
    pub log: Vec<LossReport>,
    pub checkpoints: Vec<PathBuf>,
}

/// Synthesis seed of one image in one epoch; independent of batch order.
pub fn item_seed(run_seed: u64, epoch: usize, index: usize) -> u64 {
    derive_seed(run_seed, &[tag("synth"), epoch as u64, index as u64])
}

fn epoch_order(run_seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng(derive_seed(run_seed, &[tag("order"), epoch as u64])));
    order
}

pub fn texture_bank(config: &RunConfig) -> Result<TextureBank> {
    match &config.texture_dir {
        Some(dir) => TextureBank::from_dir(Path::new(dir), config.image_size),
        None => Ok(TextureBank::default()),
    }
}

struct Prepared<T> {
    index: usize,
    seed: u64,
    pair: SynthPair,
    f_in: FeatureStack<T>,
}

fn prepare<T: Real>(model: &Model<T>, bank: &TextureBank, images: &[Image], epoch: usize, index: usize) -> Result<Prepared<T>> {
    let seed = item_seed(model.config.seed, epoch, index);
    let pair = synthesize_random(&images[index], bank, &model.config.synth, seed)?;
    let f_in = model.embed(&pair.image_a, Origin::FInput)?;
    Ok(Prepared { index, seed, pair, f_in })
}

fn write_log_row(w: &mut impl Write, step: usize, r: &LossReport) -> Result<()> {
    writeln!(w, "{step},{},{},{},{},{}", r.l_rec, r.l_focal, r.l_dice, r.l_ref, r.l_total)?;
    Ok(())
}

/// Forward, loss and backward for one item; gradients accumulate in the store.
fn accumulate<T: Real>(model: &mut Model<T>, phi: &FeatureStack<T>, item: &Prepared<T>, scale: T) -> Result<LossReport> {
    let g = Graph::new();
    let b = model.params.bind(&g);
    let f = g.constant(&item.f_in.shape(), item.f_in.data.clone())?;
    let target = g.constant(&phi.shape(), phi.data.clone())?;
    let f_hat = model.reconstruct(&b, f)?;
    let rec = rec_loss(f_hat, target)?;
    let (loss, report) = if model.config.frm_enabled {
        let pred = model.refine(&b, f, f_hat)?;
        let mask: Vec<T> = item.pair.mask.data.iter().map(|&m| T::lit(m as f64)).collect();
        let t = total_loss(rec, pred, &mask, model.config.focal)?;
        (t.loss, t.report)
    } else {
        (rec, LossReport::rec_only(rec.item().as_f64()))
    };
    if !report.is_finite() {
        return Ok(report);
    }
    g.backward(loss.scale(scale))?;
    model.params.collect_grads(&b);
    Ok(report)
}

fn dump_nan(out: Option<&Path>, epoch: usize, step: usize, items: &[(usize, u64)], report: &LossReport) -> Error {
    let detail = format!(
        "non-finite loss at epoch {epoch}, step {step}: {report:?}; batch (image index, synthesis seed) = {items:?}"
    );
    if let Some(dir) = out {
        let dump = serde_json::json!({ "epoch": epoch, "step": step, "items": items, "report": report });
        if let Err(e) = std::fs::write(dir.join("nan_dump.json"), dump.to_string()) {
            log::error!("could not write NaN dump: {e}");
        }
    }
    Error::Numerical(detail)
}

/// Trains a fresh model on anomaly-free images.
///
/// With `out_dir` set, writes `train_log.csv`, periodic `checkpoint_epoch{N}.almr`
/// files and the final `model.almr`.
pub fn train<T: Real>(config: &RunConfig, images: &[Image], out_dir: Option<&Path>) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if images.is_empty() {
        return Err(Error::DataContract("training split is empty".into()));
    }
    let mut model = Model::<T>::new(config.clone())?;
    let bank = texture_bank(config)?;
    let phi: Vec<FeatureStack<T>> = images.iter().map(|im| model.embed(im, Origin::Phi)).collect::<Result<_>>()?;
    let adam = AdamConfig { lr: config.lr, ..AdamConfig::default() };
    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut w = BufWriter::new(File::create(dir.join("train_log.csv"))?);
            writeln!(w, "{LOG_HEADER}")?;
            Some(w)
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let order = epoch_order(config.seed, epoch, images.len());
        // Synthesis and embedding only read the frozen backbone, which never changes.
        let snapshot = model.clone();
        let mut run_epoch = |next: &mut dyn FnMut() -> Result<Prepared<T>>| -> Result<()> {
            for chunk in order.chunks(config.batch_size) {
                let scale = T::one() / T::from_usize(chunk.len()).unwrap();
                let mut sums = [0.0f64; 3];
                let mut seeds = Vec::with_capacity(chunk.len());
                for _ in chunk {
                    let item = next()?;
                    seeds.push((item.index, item.seed));
                    let r = accumulate(&mut model, &phi[item.index], &item, scale)?;
                    if !r.is_finite() {
                        return Err(dump_nan(out_dir, epoch, step + 1, &seeds, &r));
                    }
                    sums[0] += r.l_rec;
                    sums[1] += r.l_focal;
                    sums[2] += r.l_dice;
                }
                let n = chunk.len() as f64;
                let report = LossReport::new(sums[0] / n, sums[1] / n, sums[2] / n);
                model.params.adam_step(&adam)?;
                step += 1;
                if let Some(w) = log_file.as_mut() {
                    write_log_row(w, step, &report)?;
                }
                log.push(report);
            }
            Ok(())
        };
        if config.strict_deterministic {
            let mut it = order.iter();
            run_epoch(&mut || prepare(&snapshot, &bank, images, epoch, *it.next().expect("one item per slot")))?;
        } else {
            // A producer thread runs ahead under a bounded queue.
            let (tx, rx) = mpsc::sync_channel::<Result<Prepared<T>>>(2 * config.batch_size);
            std::thread::scope(|s| -> Result<()> {
                let order_ref = &order;
                let (snap, bank_ref) = (&snapshot, &bank);
                s.spawn(move || {
                    for &i in order_ref {
                        if tx.send(prepare(snap, bank_ref, images, epoch, i)).is_err() {
                            break;
                        }
                    }
                });
                let result = run_epoch(&mut || rx.recv().map_err(|_| Error::Numerical("prefetch worker stopped".into()))?);
                drop(rx);
                result
            })?;
        }
        let last = log.last().copied().unwrap_or(LossReport::rec_only(f64::NAN));
        log::info!("epoch {}/{} l_rec {:.4} l_ref {:.4} l_total {:.4}", epoch + 1, config.epochs, last.l_rec, last.l_ref, last.l_total);
        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 && epoch + 1 != config.epochs {
                let p = dir.join(format!("checkpoint_epoch{}.almr", epoch + 1));
                model.save(&p)?;
                checkpoints.push(p);
            }
        }
    }
    if let Some(mut w) = log_file {
        w.flush()?;
    }
    if let Some(dir) = out_dir {
        let p = dir.join("model.almr");
        model.save(&p)?;
        checkpoints.push(p);
    }
    Ok(TrainOutcome { model, log, checkpoints })
}
