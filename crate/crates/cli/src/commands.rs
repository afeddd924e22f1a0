use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fdct::config_file::RunConfig;
use fdct::data::{
    load_dataset, png, resize_bilinear, resize_depth_nearest, write_synthetic_dataset,
    DatasetIndex, SizedIndex, Split, SynthSceneSpec,
};
use fdct::metrics::{MetricsReport, PixelStats};
use fdct::model::{Checkpoint, DepthFusionMode, DownsampleMode, FdctNetwork, SIZE_MULTIPLE};
use fdct::train::{
    ablation_table, evaluate, evaluate_raw_depth, evaluate_with, fit, run_ablation,
    AblationVariant, FitOptions,
};
use fdct::DepthMap;

use crate::args::{AblateArgs, EvalArgs, GenDataArgs, ParamCountArgs, PredictArgs, TrainArgs};
use crate::UsageError;

pub const RESOLVED_CONFIG: &str = "config.toml";
pub const ABLATION_FILE: &str = "ablation.json";

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    // keep the typed error so config mistakes map to the usage exit code
    Ok(RunConfig::parse(&text)?)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn open_dataset(root: &Path, split: Split) -> Result<DatasetIndex> {
    let index = load_dataset(root, split)?;
    for w in &index.warnings {
        log::warn!("{w}");
    }
    Ok(index)
}

/// `--val-data` if given, else `<data>/val` when it exists.
fn val_root(data: &Path, val_data: Option<&Path>) -> Option<PathBuf> {
    val_data
        .map(Path::to_path_buf)
        .or_else(|| Some(data.join(Split::Val.as_str())).filter(|p| p.is_dir()))
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec = SynthSceneSpec {
        height: a.size.0,
        width: a.size.1,
        base_depth: a.base_depth,
        n_bumps: a.bumps,
        n_transparent_regions: a.regions,
        dropout_prob: a.dropout,
        noise_std: a.noise,
        region_offset: a.offset,
        seed: a.seed,
    };
    spec.validate()?;
    write_synthetic_dataset(&a.out, &spec, a.scenes)
        .with_context(|| format!("writing dataset to {}", a.out.display()))?;
    log::info!("wrote {} scenes to {}", a.scenes, a.out.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = read_config(a.config.as_deref())?;
    a.model.apply(&mut cfg.model);
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
        // a shortened run keeps only the milestones that still fit
        cfg.train.milestone_epochs.retain(|m| *m < e);
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.train.initial_lr = lr;
    }
    if let Some(size) = a.size {
        cfg.size = size;
    }
    cfg.validate()?;

    let train_index = open_dataset(&a.data, Split::Train)?;
    let train_src = SizedIndex {
        index: &train_index,
        size: cfg.size,
    };
    let val_index = match val_root(&a.data, a.val_data.as_deref()) {
        Some(root) => Some(open_dataset(&root, Split::Val)?),
        None => None,
    };
    let val_src = val_index.as_ref().map(|index| SizedIndex {
        index,
        size: cfg.size,
    });

    let resume = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.config != cfg.model {
                bail!(
                    "checkpoint {} was trained with a different model configuration",
                    p.display()
                );
            }
            Some(ck)
        }
        None => None,
    };

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_file(&a.out.join(RESOLVED_CONFIG), cfg.to_toml())?;

    let mut net = FdctNetwork::new(cfg.model.clone(), cfg.train.seed)?;
    log::info!(
        "training {} parameters on {} scenes at {}x{}",
        net.count_parameters(),
        train_index.len(),
        cfg.size.0,
        cfg.size.1
    );
    let out = fit(
        &mut net,
        &train_src,
        val_src.as_ref(),
        &cfg.train,
        &cfg.loss,
        FitOptions {
            out_dir: Some(a.out.clone()),
            max_steps: a.max_steps,
            resume,
            range: cfg.range,
            eval_batch_size: None,
        },
    )?;
    if let Some(r) = out.history.iter().rev().find_map(|r| r.val.as_ref()) {
        println!("{}", MetricsReport::table_header());
        println!("{}", r.table_row());
    }
    log::info!(
        "ran {} steps, outputs in {}",
        out.steps.len(),
        a.out.display()
    );
    Ok(())
}

fn csv_rows(per_sample: &[(String, PixelStats)]) -> String {
    let mut s = String::from("id,pixels,rmse,rel,mae,delta_105,delta_110,delta_125\n");
    let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    for (id, stats) in per_sample {
        let r = stats.report(1);
        let _ = writeln!(
            s,
            "{id},{},{},{},{},{},{},{}",
            r.pixel_count,
            f(r.rmse),
            f(r.rel),
            f(r.mae),
            f(r.delta_105),
            f(r.delta_110),
            f(r.delta_125)
        );
    }
    s
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let sibling = a
        .checkpoint
        .parent()
        .map(|d| d.join(RESOLVED_CONFIG))
        .filter(|p| p.is_file());
    let config_path = a.config.clone().or(sibling);
    let cfg = match &config_path {
        Some(p) => Some(read_config(Some(p))?),
        None => None,
    };
    if let (Some(cfg), Some(p)) = (&cfg, &config_path) {
        if cfg.model != ck.config {
            bail!(
                "config {} does not match the model stored in {}",
                p.display(),
                a.checkpoint.display()
            );
        }
    }
    let range = cfg.as_ref().map(|c| c.range).unwrap_or_default();
    let index = open_dataset(&a.data, a.split)?;
    let size = match (a.size, &cfg) {
        (Some(s), _) => s,
        (None, Some(c)) => c.size,
        (None, None) => png::read_dimensions(&index.entries[0].gt)?,
    };
    if size.0 % SIZE_MULTIPLE != 0 || size.1 % SIZE_MULTIPLE != 0 {
        return Err(UsageError(format!(
            "evaluation size {}x{} must be a multiple of {SIZE_MULTIPLE}; pass --size",
            size.0, size.1
        ))
        .into());
    }
    let src = SizedIndex {
        index: &index,
        size,
    };

    let (report, per_sample) = if a.gt_as_prediction {
        evaluate_with(&src, range, a.batch_size, |b| {
            Ok(b.iter().map(|s| s.gt_depth.clone()).collect())
        })?
    } else if a.raw_as_prediction {
        evaluate_raw_depth(&src, range)?
    } else {
        let net = ck.to_network()?;
        evaluate(&net, &src, range, a.batch_size)?
    };

    let json = serde_json::to_string_pretty(&report)?;
    write_file(&a.report, json)?;
    let csv = a
        .csv
        .clone()
        .unwrap_or_else(|| a.report.with_extension("csv"));
    write_file(&csv, csv_rows(&per_sample))?;
    println!("{}", MetricsReport::table_header());
    println!("{}", report.table_row());
    Ok(())
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let net = ck.to_network()?;
    let rgb = png::read_rgb(&a.rgb)?;
    let raw = png::read_depth(&a.depth)?;
    if rgb.shape() != raw.shape() {
        return Err(UsageError(format!(
            "rgb is {:?} but depth is {:?}",
            rgb.shape(),
            raw.shape()
        ))
        .into());
    }
    let original = raw.shape();
    let size = a.size.unwrap_or(original);
    if size.0 % SIZE_MULTIPLE != 0 || size.1 % SIZE_MULTIPLE != 0 {
        return Err(UsageError(format!(
            "input {}x{} is not a multiple of {SIZE_MULTIPLE}; pass --size",
            size.0, size.1
        ))
        .into());
    }
    let (rgb, raw_in) = if size == original {
        (rgb, raw.clone())
    } else {
        (
            resize_bilinear(&rgb, size),
            resize_depth_nearest(&raw, size),
        )
    };
    let dmax = net.config().depth_max;
    let mut pred = net.forward(&rgb, &raw_in)?.clamped(0.0, dmax);
    if pred.shape() != original {
        pred = resize_depth_nearest(&pred, original);
    }
    png::write_depth(&a.out, &pred)?;
    if let Some(viz) = &a.viz {
        let (h, w) = original;
        let side = DepthMap::from_fn(h, 2 * w, |r, c| {
            if c < w {
                raw.get(r, c)
            } else {
                pred.get(r, c - w)
            }
        });
        let max = side.values().iter().cloned().fold(0.0, f64::max).max(1e-6);
        png::write_depth_preview(viz, &side, max)?;
    }
    log::info!("wrote {}", a.out.display());
    Ok(())
}

pub fn param_count(a: ParamCountArgs) -> Result<()> {
    let mut cfg = read_config(a.config.as_deref())?;
    a.model.apply(&mut cfg.model);
    cfg.model.validate()?;
    let net = FdctNetwork::new(cfg.model, 0)?;
    let total = net.count_parameters();
    let blocks = net.params().block_counts();
    if a.json {
        let obj = serde_json::json!({
            "total": total,
            "blocks": blocks
                .iter()
                .map(|(b, n)| serde_json::json!({"block": b, "parameters": n}))
                .collect::<Vec<_>>(),
        });
        println!("{}", serde_json::to_string_pretty(&obj)?);
        return Ok(());
    }
    let w = blocks
        .iter()
        .map(|(b, _)| b.len())
        .max()
        .unwrap_or(5)
        .max(5);
    for (b, n) in &blocks {
        println!("{b:<w$} {n:>10}");
    }
    println!("{:<w$} {total:>10}", "total");
    println!("{:.3}M parameters", total as f64 / 1e6);
    Ok(())
}

/// The base configuration plus one variant per ablation axis.
pub fn ablation_grid(base: &RunConfig) -> Vec<AblationVariant> {
    let v = |name: &str, f: &dyn Fn(&mut AblationVariant)| {
        let mut var = AblationVariant {
            name: name.into(),
            model: base.model.clone(),
            loss: base.loss.clone(),
        };
        f(&mut var);
        var
    };
    vec![
        v("base", &|_| {}),
        v("max_pool", &|x| {
            x.model.downsample_mode = DownsampleMode::MaxPool
        }),
        v("avg_pool", &|x| {
            x.model.downsample_mode = DownsampleMode::AvgPool
        }),
        v("strided_conv", &|x| {
            x.model.downsample_mode = DownsampleMode::StridedConv
        }),
        v("conv_fuse", &|x| {
            x.model.depth_fusion_mode = DepthFusionMode::ConvFuse
        }),
        v("concat", &|x| {
            x.model.depth_fusion_mode = DepthFusionMode::Concat
        }),
        v("edge_weighting", &|x| {
            x.loss.edge_weighting = !base.loss.edge_weighting
        }),
        v("no_fusion_branch", &|x| x.model.use_fusion_branch = false),
        v("no_shortcuts", &|x| x.model.use_cross_shortcuts = false),
    ]
    .into_iter()
    // drop variants identical to the base
    .enumerate()
    .filter(|(i, var)| *i == 0 || var.model != base.model || var.loss != base.loss)
    .map(|(_, var)| var)
    .collect()
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = read_config(a.config.as_deref())?;
    if a.slim {
        crate::args::ModelFlags {
            slim: true,
            ..Default::default()
        }
        .apply(&mut cfg.model);
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
        cfg.train.milestone_epochs.retain(|m| *m < e);
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(size) = a.size {
        cfg.size = size;
    }
    cfg.validate()?;

    let train_index = open_dataset(&a.data, Split::Train)?;
    let Some(val_path) = val_root(&a.data, a.val_data.as_deref()) else {
        return Err(UsageError(
            "ablation needs validation data: pass --val-data or provide <data>/val".into(),
        )
        .into());
    };
    let val_index = open_dataset(&val_path, Split::Val)?;
    let train_src = SizedIndex {
        index: &train_index,
        size: cfg.size,
    };
    let val_src = SizedIndex {
        index: &val_index,
        size: cfg.size,
    };

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_file(&a.out.join(RESOLVED_CONFIG), cfg.to_toml())?;
    let grid = ablation_grid(&cfg);
    log::info!("training {} variants", grid.len());
    let rows = run_ablation(&grid, &train_src, &val_src, &cfg.train, cfg.range);
    write_file(
        &a.out.join(ABLATION_FILE),
        serde_json::to_string_pretty(&rows)?,
    )?;
    print!("{}", ablation_table(&rows));
    Ok(())
}
