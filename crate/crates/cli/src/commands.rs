use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cian_core::affinity::pair_forward;
use cian_core::dataset::{generate_dataset, read_dataset, write_dataset, Split, SynthImage};
use cian_core::evaluation::{evaluate, iou_csv};
use cian_core::formats::{encode_gray, read_mask, write_mask, write_ppm};
use cian_core::model::{predict, ModelParams};
use cian_core::seeds::{
    background_reference, generate_seeds, multilabel_accuracy, seed_quality, substitute_seeds,
    train_cam_classifier,
};
use cian_core::train::{
    load_checkpoint, load_encoder, log_csv, prepare, run_phase, run_phases, save_checkpoint,
    save_encoder, AblationReport, Phase, Prepared, TrainOutcome,
};
use cian_core::{SeedMask, Tensor};

use crate::config::{Mode, RunConfig};

const BACKBONE_DIR: &str = "backbone";

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let p = &cfg.pipeline;
    for (split, n) in [(Split::Train, p.n_train), (Split::Val, p.n_val)] {
        let images = generate_dataset(n, p.image_size, p.classes, p.data_seed, split)?;
        let dir = cfg.data_dir().join(split.as_str());
        write_dataset(&dir, &images).with_context(|| format!("writing {}", dir.display()))?;
        println!("{split}: {} images in {}", images.len(), dir.display());
    }
    Ok(())
}

fn read_split(cfg: &RunConfig, split: Split) -> Result<Vec<SynthImage>> {
    let dir = cfg.data_dir().join(split.as_str());
    read_dataset(&dir).with_context(|| {
        format!(
            "reading dataset {} (run `cian gen-data` first)",
            dir.display()
        )
    })
}

fn check_thresholds(cfg: &RunConfig) -> Result<()> {
    let p = &cfg.pipeline;
    for (name, t) in [("fg_thresh", p.fg_thresh), ("bg_thresh", p.bg_thresh)] {
        if !(0.0..=1.0).contains(&t) {
            bail!("{name} must lie in [0, 1], got {t}");
        }
    }
    if !(0.0..=1.0).contains(&p.sub_ratio) {
        bail!("sub_ratio must lie in [0, 1], got {}", p.sub_ratio);
    }
    Ok(())
}

pub fn seeds(cfg: &RunConfig) -> Result<()> {
    check_thresholds(cfg)?;
    let p = &cfg.pipeline;
    let train = read_split(cfg, Split::Train)?;
    let cam = train_cam_classifier(&train, p.classes, &p.cam)?;
    println!(
        "classifier multi-label accuracy {:.3}",
        multilabel_accuracy(&cam, &train)?
    );
    let refs: Vec<&Tensor<f32>> = train.iter().map(|i| &i.pixels).collect();
    let reference = background_reference(&refs)?;
    let (seeds, saliency): (Vec<SeedMask>, Vec<Tensor<f32>>) =
        generate_seeds(&cam, &train, reference, p.fg_thresh, p.bg_thresh)?
            .into_iter()
            .unzip();
    let truth: Vec<SeedMask> = train.iter().map(|i| i.gt.clone()).collect();
    let seeds = substitute_seeds(&seeds, &truth, p.sub_ratio, p.data_seed)?;

    let dir = cfg.seeds_dir();
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for ((img, seed), sal) in train.iter().zip(&seeds).zip(&saliency) {
        write_mask(&dir.join(format!("{}_seed.pgm", img.id)), seed)?;
        fs::write(dir.join(format!("{}_sal.pgm", img.id)), encode_gray(sal)?)?;
    }
    save_encoder(&dir.join(BACKBONE_DIR), &cam.encoder)?;
    let (precision, recall) = seed_quality(&seeds, &truth)?;
    println!("seeds: {} masks in {}", seeds.len(), dir.display());
    println!("seed precision {precision:.4} recall {recall:.4}");
    Ok(())
}

fn load_prepared(cfg: &RunConfig) -> Result<Prepared> {
    let train = read_split(cfg, Split::Train)?;
    let val = read_split(cfg, Split::Val)?;
    let dir = cfg.seeds_dir();
    let hint = || {
        format!(
            "reading seeds in {} (run `cian seeds` first)",
            dir.display()
        )
    };
    let mut seeds = Vec::with_capacity(train.len());
    let mut saliency = Vec::with_capacity(train.len());
    for img in &train {
        seeds.push(read_mask(&dir.join(format!("{}_seed.pgm", img.id))).with_context(hint)?);
        let bytes = fs::read(dir.join(format!("{}_sal.pgm", img.id))).with_context(hint)?;
        saliency.push(cian_core::formats::decode_gray(&bytes)?);
    }
    let backbone = load_encoder(&dir.join(BACKBONE_DIR)).with_context(hint)?;
    Ok(Prepared {
        train,
        val,
        seeds,
        saliency,
        backbone,
    })
}

fn phase_of(mode: Mode) -> Option<Phase> {
    match mode {
        Mode::Baseline => Some(Phase::Baseline),
        Mode::Ce => Some(Phase::Ce),
        Mode::Cp => Some(Phase::Cp),
        Mode::Rt => Some(Phase::Rt),
        Mode::Ablate => None,
    }
}

fn mode_of(phase: Phase) -> Mode {
    match phase {
        Phase::Baseline => Mode::Baseline,
        Phase::Ce => Mode::Ce,
        Phase::Cp => Mode::Cp,
        Phase::Rt => Mode::Rt,
    }
}

fn write_outcome(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    save_checkpoint(&dir.join("checkpoint"), &outcome.params)?;
    fs::write(dir.join("log.csv"), log_csv(&outcome.log))?;
    let mut pairs = outcome.pair_log.join("\n");
    if !pairs.is_empty() {
        pairs.push('\n');
    }
    fs::write(dir.join("pairs.tsv"), pairs)?;
    Ok(())
}

fn write_phases(
    cfg: &RunConfig,
    report: &AblationReport,
    outcomes: &[(Phase, TrainOutcome)],
) -> Result<()> {
    for (phase, outcome) in outcomes {
        write_outcome(&cfg.train_dir(mode_of(*phase)), outcome)?;
    }
    let path = cfg.out.join("ablation.csv");
    fs::write(&path, report.to_csv())?;
    print!("{}", report.to_csv());
    println!("report: {}", path.display());
    for (phase, outcome) in outcomes {
        if let Some(why) = &outcome.aborted {
            bail!("{} aborted: {why}", phase.label());
        }
    }
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let data = load_prepared(cfg)?;
    let p = &cfg.pipeline;
    let Some(phase) = phase_of(cfg.mode) else {
        let (report, outcomes) = run_phases(p, &data, &Phase::ALL)?;
        let outcomes: Vec<(Phase, TrainOutcome)> = Phase::ALL.into_iter().zip(outcomes).collect();
        return write_phases(cfg, &report, &outcomes);
    };
    let outcome = run_phase(phase, p, &data)?;
    let dir = cfg.train_dir(cfg.mode);
    fs::create_dir_all(&dir)?;
    write_outcome(&dir, &outcome)?;
    println!("{}: checkpoint in {}", phase.label(), dir.display());
    if let Some(why) = &outcome.aborted {
        bail!("training aborted ({why}); last good parameters saved");
    }
    Ok(())
}

pub fn ablate(cfg: &RunConfig) -> Result<()> {
    check_thresholds(cfg)?;
    let p = &cfg.pipeline;
    let data = prepare(p)?;
    let (report, outcomes) = run_phases(p, &data, &Phase::ALL)?;
    let outcomes: Vec<(Phase, TrainOutcome)> = Phase::ALL.into_iter().zip(outcomes).collect();
    write_phases(cfg, &report, &outcomes)
}

fn class_color(class: u8, classes: usize) -> [f32; 3] {
    let h = (class as f32 - 1.0) / classes.max(1) as f32 * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Image with foreground predictions tinted by class.
fn overlay(image: &Tensor<f32>, pred: &SeedMask, classes: usize) -> Result<Tensor<f32>> {
    let mut out = image.clone();
    for (px, &label) in out.data_mut().chunks_mut(3).zip(pred.labels()) {
        if label != 0 {
            let c = class_color(label, classes);
            for k in 0..3 {
                px[k] = 0.5 * px[k] + 0.5 * c[k];
            }
        }
    }
    Ok(out)
}

/// Self-affinity of one image: the row of the foreground pixel nearest the
/// foreground centroid, and the mean row over all foreground pixels, both
/// on the pooled reference grid and scaled to a maximum of one.
fn affinity_maps(
    params: &ModelParams<f32>,
    image: &Tensor<f32>,
    pred: &SeedMask,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let x = params.encoder.forward(image)?;
    let state = pair_forward(&x, &x, &params.affinity)?;
    let aff = state.affinity();
    let (gh, gw) = aff.reference_grid;
    let nr = gh * gw;
    let w = pred.width();
    let fg: Vec<usize> = (0..pred.len()).filter(|&i| pred.labels()[i] != 0).collect();
    let pool: Vec<usize> = if fg.is_empty() {
        (0..pred.len()).collect()
    } else {
        fg
    };
    let (sy, sx) = pool.iter().fold((0.0, 0.0), |(y, x), &i| {
        (y + (i / w) as f64, x + (i % w) as f64)
    });
    let (cy, cx) = (sy / pool.len() as f64, sx / pool.len() as f64);
    let centre = *pool
        .iter()
        .min_by(|&&a, &&b| {
            let d = |i: usize| ((i / w) as f64 - cy).powi(2) + ((i % w) as f64 - cx).powi(2);
            d(a).total_cmp(&d(b))
        })
        .expect("non-empty");
    let rows = aff.weights.data();
    let single = rows[centre * nr..(centre + 1) * nr].to_vec();
    let mut mean = vec![0.0f32; nr];
    for &i in &pool {
        for (m, &v) in mean.iter_mut().zip(&rows[i * nr..(i + 1) * nr]) {
            *m += v;
        }
    }
    let to_map = |v: Vec<f32>| {
        let max = v.iter().fold(0.0f32, |m, &x| m.max(x));
        let scaled = v
            .iter()
            .map(|&x| if max > 0.0 { x / max } else { 0.0 })
            .collect();
        Tensor::new(&[gh, gw], scaled)
    };
    Ok((to_map(single)?, to_map(mean)?))
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let val = read_split(cfg, Split::Val)?;
    let out = cfg.out.join("eval");
    fs::create_dir_all(&out)?;
    let truth: Vec<SeedMask> = val.iter().map(|i| i.gt.clone()).collect();

    let (classes, preds, params) = match &cfg.predictions {
        Some(dir) => {
            let preds = val
                .iter()
                .map(|img| {
                    let path = dir.join(format!("{}_pred.pgm", img.id));
                    read_mask(&path).with_context(|| format!("reading {}", path.display()))
                })
                .collect::<Result<Vec<_>>>()?;
            (cfg.pipeline.classes, preds, None)
        }
        None => {
            let dir = cfg.checkpoint_dir();
            let params = load_checkpoint(dir)
                .with_context(|| format!("loading checkpoint {}", dir.display()))?;
            let preds = val
                .iter()
                .map(|img| predict(&params, &img.pixels))
                .collect::<cian_core::Result<Vec<_>>>()?;
            (params.num_classes(), preds, Some(params))
        }
    };

    let cm = evaluate(classes + 1, &truth, &preds)?;
    let csv = iou_csv(&cm);
    fs::write(out.join("iou.csv"), &csv)?;
    for (img, pred) in val.iter().zip(&preds) {
        write_mask(&out.join(format!("{}_pred.pgm", img.id)), pred)?;
    }
    for (img, pred) in val.iter().zip(&preds).take(cfg.vis) {
        write_ppm(
            &out.join(format!("{}_overlay.ppm", img.id)),
            &overlay(&img.pixels, pred, classes)?,
        )?;
        if let Some(params) = &params {
            let (single, mean) = affinity_maps(params, &img.pixels, pred)?;
            fs::write(
                out.join(format!("{}_aff.pgm", img.id)),
                encode_gray(&single)?,
            )?;
            fs::write(
                out.join(format!("{}_aff_avg.pgm", img.id)),
                encode_gray(&mean)?,
            )?;
        }
    }
    print!("{csv}");
    println!("mIoU {:.4} ({})", cm.miou().1, out.display());
    Ok(())
}
