use std::path::{Path, PathBuf};

use serde_json::json;

use dualsr_core::backbone::{pretrain_teacher as train_teacher, DenoiserRole};
use dualsr_core::checkpoint::Checkpoint;
use dualsr_core::codec::{reconstruction_psnr, train_codec, CodecWeights};
use dualsr_core::degrade::{load_pairs, make_pairs, save_pairs, DegradationRecipe, Pair};
use dualsr_core::infer::{Bundle, GuidanceScales};
use dualsr_core::metrics::evaluate;
use dualsr_core::perception::{accuracy, train_classifier};
use dualsr_core::runlog::RunLog;
use dualsr_core::tensor::{ImageTensor, LatentTensor};
use dualsr_core::toydata::{generate, load_dataset, save_dataset};
use dualsr_core::trainer::{encode_pairs, train_pixel_stage, train_semantic_stage, SemanticContext};

use crate::{parse_list, CliConfig, CliError, CliResult, RestoreArgs, RunDir, ServeArgs, SweepArgs};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Per-split seed offset so the three splits never share a stream.
fn split_seed(seed: u64, split: usize) -> u64 {
    seed.wrapping_add((split as u64) << 32)
}

fn require(path: PathBuf, run_first: &'static str) -> CliResult<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::MissingPrerequisite { run_first, path })
    }
}

fn load_checkpoint(path: PathBuf, run_first: &'static str) -> CliResult<Checkpoint> {
    Ok(Checkpoint::load(require(path, run_first)?)?)
}

fn toy_split(run: &RunDir, split: &str) -> CliResult<Vec<(ImageTensor, usize)>> {
    let dir = require(run.toy(split), "gen-data")?;
    require(dir.join("labels.csv"), "gen-data")?;
    Ok(load_dataset(dir)?)
}

fn pair_split(run: &RunDir, split: &str) -> CliResult<Vec<Pair>> {
    let dir = require(run.pairs(split), "degrade")?;
    require(dir.join("records.jsonl"), "degrade")?;
    Ok(load_pairs(dir)?)
}

fn lq_hq(pairs: &[Pair]) -> Vec<(ImageTensor, ImageTensor)> {
    pairs.iter().map(|p| (p.lq.clone(), p.hq.clone())).collect()
}

/// Opens `logs/<command>.jsonl` and writes the resolved config as its first
/// record.
fn open_log(cfg: &CliConfig, run: &RunDir, command: &str) -> CliResult<RunLog> {
    let mut log = RunLog::to_file(run.log(command))?;
    log.record(json!({"stage": "config", "command": command, "config": cfg}))?;
    Ok(log)
}

fn empty_checkpoint(cfg: &CliConfig) -> CliResult<Checkpoint> {
    let config = serde_json::to_value(cfg).map_err(|e| CliError::Failed(e.to_string()))?;
    Ok(Checkpoint::new(cfg.schedule, cfg.train.student_timestep, config))
}

fn save(ck: &Checkpoint, path: &Path) -> CliResult<()> {
    ck.save(path)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn encode_all(codec: &CodecWeights, images: &[ImageTensor]) -> CliResult<Vec<LatentTensor>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let z = codec.encode(&ImageTensor::stack(chunk)?)?.detach();
        for i in 0..chunk.len() {
            out.push(z.item(i)?);
        }
    }
    Ok(out)
}

fn split_labeled(items: Vec<(ImageTensor, usize)>) -> (Vec<ImageTensor>, Vec<usize>) {
    items.into_iter().unzip()
}

pub fn gen_data(cfg: &CliConfig, run: &RunDir) -> CliResult<()> {
    let d = &cfg.data;
    for (k, (split, n)) in SPLITS.iter().zip([d.n_train, d.n_val, d.n_test]).enumerate() {
        let items = generate(n, d.size, split_seed(cfg.seed, k))?;
        save_dataset(run.toy(split), &items)?;
        log::info!("{split}: {n} textures of {0}x{0}", d.size);
    }
    Ok(())
}

pub fn degrade(cfg: &CliConfig, run: &RunDir) -> CliResult<()> {
    for (k, split) in SPLITS.iter().enumerate() {
        let (hq, _) = split_labeled(toy_split(run, split)?);
        let recipe = DegradationRecipe {
            seed: split_seed(cfg.degrade.seed, k),
            ..cfg.degrade.clone()
        };
        let pairs = make_pairs(&hq, &recipe)?;
        save_pairs(run.pairs(split), &pairs)?;
        log::info!("{split}: {} pairs", pairs.len());
    }
    Ok(())
}

/// The codec sees both HQ and LQ images since it encodes both.
pub fn pretrain_codec(cfg: &CliConfig, run: &RunDir) -> CliResult<()> {
    let images = |pairs: Vec<Pair>| -> Vec<ImageTensor> { pairs.into_iter().flat_map(|p| [p.hq, p.lq]).collect() };
    let train = images(pair_split(run, "train")?);
    let val = images(pair_split(run, "val")?);
    let mut log = open_log(cfg, run, "pretrain-codec")?;
    let codec = train_codec(cfg.codec.model.clone(), &train, &val, &cfg.codec.train, &mut log)?;
    let psnr = reconstruction_psnr(&codec, &val)?;
    log::info!("codec: val reconstruction PSNR {psnr:.2} dB, latent scale {:.4}", codec.config().latent_scale);
    let mut ck = empty_checkpoint(cfg)?;
    ck.codec = Some(codec);
    save(&ck, &run.checkpoint("codec"))
}

pub fn pretrain_classifier(cfg: &CliConfig, run: &RunDir) -> CliResult<()> {
    let (train_x, train_y) = split_labeled(toy_split(run, "train")?);
    let (val_x, val_y) = split_labeled(toy_split(run, "val")?);
    let mut log = open_log(cfg, run, "pretrain-classifier")?;
    let net = train_classifier(
        cfg.classifier.model.clone(),
        (&train_x, &train_y),
        (&val_x, &val_y),
        &cfg.classifier.train,
        &mut log,
    )?;
    log::info!("classifier: val accuracy {:.3}", accuracy(&net, &val_x, &val_y)?);
    let mut ck = empty_checkpoint(cfg)?;
    ck.featnet = Some(net);
    save(&ck, &run.checkpoint("classifier"))
}

pub fn pretrain_teacher(cfg: &CliConfig, run: &RunDir) -> CliResult<()> {
    let codec_ck = load_checkpoint(run.checkpoint("codec"), "pretrain-codec")?;
    let codec = codec_ck.codec()?;
    let (train_x, train_y) = split_labeled(toy_split(run, "train")?);
    let (val_x, val_y) = split_labeled(toy_split(run, "val")?);
    let train_z = encode_all(codec, &train_x)?;
    let val_z = encode_all(codec, &val_x)?;
    let mut log = open_log(cfg, run, "pretrain-teacher")?;
    let teacher = train_teacher(
        cfg.teacher.model.clone(),
        (&train_z, &train_y),
        (&val_z, &val_y),
        &cfg.schedule()?,
        &cfg.teacher.train,
        &mut log,
    )?;
    let mut ck = empty_checkpoint(cfg)?;
    ck.teacher = Some(teacher);
    save(&ck, &run.checkpoint("teacher"))
}

pub fn train_pix(cfg: &CliConfig, run: &RunDir) -> CliResult<()> {
    let codec_ck = load_checkpoint(run.checkpoint("codec"), "pretrain-codec")?;
    let teacher_ck = load_checkpoint(run.checkpoint("teacher"), "pretrain-teacher")?;
    let codec = codec_ck.codec()?;
    let base = teacher_ck.teacher()?.with_role(DenoiserRole::StudentBase);
    let train = encode_pairs(codec, &lq_hq(&pair_split(run, "train")?))?;
    let val = encode_pairs(codec, &lq_hq(&pair_split(run, "val")?))?;
    let mut log = open_log(cfg, run, "train-pix")?;
    let pixel = train_pixel_stage(&train, &val, codec, &base, &cfg.schedule()?, &cfg.train, &mut log)?;
    let mut ck = empty_checkpoint(cfg)?;
    ck.codec = Some(codec.clone());
    ck.student_base = Some(base);
    ck.pixel = Some(pixel);
    save(&ck, &run.checkpoint("stage1"))
}

pub fn train_sem(cfg: &CliConfig, run: &RunDir) -> CliResult<()> {
    let stage1 = load_checkpoint(run.checkpoint("stage1"), "train-pix")?;
    let teacher_ck = load_checkpoint(run.checkpoint("teacher"), "pretrain-teacher")?;
    let classifier_ck = load_checkpoint(run.checkpoint("classifier"), "pretrain-classifier")?;
    let codec = stage1.codec()?;
    let sched = cfg.schedule()?;
    let ctx = SemanticContext {
        codec,
        base: stage1.student_base()?,
        pixel: stage1.pixel()?,
        teacher: teacher_ck.teacher()?,
        featnet: classifier_ck.featnet()?,
        sched: &sched,
    };
    let train = encode_pairs(codec, &lq_hq(&pair_split(run, "train")?))?;
    let val = encode_pairs(codec, &lq_hq(&pair_split(run, "val")?))?;
    let mut log = open_log(cfg, run, "train-sem")?;
    let semantic = train_semantic_stage(&train, &val, &ctx, &cfg.train, &mut log)?;
    let mut ck = empty_checkpoint(cfg)?;
    ck.codec = Some(codec.clone());
    ck.featnet = Some(ctx.featnet.clone());
    ck.teacher = Some(ctx.teacher.clone());
    ck.student_base = Some(ctx.base.clone());
    ck.pixel = Some(ctx.pixel.clone());
    ck.semantic = Some(semantic);
    save(&ck, &run.checkpoint("stage2"))
}

/// Loads the stage-2 checkpoint (or `explicit`) as an inference bundle.
pub fn load_bundle(run: &RunDir, explicit: Option<&Path>) -> CliResult<(Bundle, String)> {
    let path = explicit.map(Path::to_path_buf).unwrap_or_else(|| run.checkpoint("stage2"));
    let ck = load_checkpoint(path, "train-sem")?;
    Ok((ck.bundle()?, ck.build_tag.clone()))
}

pub fn eval(cfg: &CliConfig, run: &RunDir, checkpoint: Option<&Path>) -> CliResult<()> {
    let (bundle, _) = load_bundle(run, checkpoint)?;
    let pairs = lq_hq(&pair_split(run, "test")?);
    let report = evaluate(&pairs, &bundle, &cfg.eval.guidance_scales())?;
    let csv = report.to_csv();
    std::fs::write(run.reports().join("metrics.csv"), &csv)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Failed(e.to_string()))?;
    std::fs::write(run.reports().join("metrics.json"), json)?;
    print!("{csv}");
    Ok(())
}

/// Tiles are laid out row-major: rows follow `--pix`, columns `--sem`,
/// separated by a white gutter.
pub fn sweep(cfg: &CliConfig, run: &RunDir, args: &SweepArgs) -> CliResult<()> {
    let _ = cfg;
    let (bundle, _) = load_bundle(run, args.ckpt.checkpoint.as_deref())?;
    let (lq, gt) = match (&args.image, &args.gt) {
        (Some(i), g) => (ImageTensor::load_png(i)?, g.as_ref().map(ImageTensor::load_png).transpose()?),
        (None, _) => {
            let pairs = pair_split(run, "test")?;
            let p = pairs.get(args.index).ok_or_else(|| {
                CliError::Usage(format!("--index {} but the test split has {} pairs", args.index, pairs.len()))
            })?;
            (p.lq.clone(), Some(p.hq.clone()))
        }
    };
    let pix = parse_list(&args.pix)?;
    let sem = parse_list(&args.sem)?;
    let scales: Vec<GuidanceScales> = pix
        .iter()
        .flat_map(|&p| sem.iter().map(move |&s| GuidanceScales::new(p, s)))
        .collect();
    for s in &scales {
        s.validate()?;
    }
    let cache = bundle.build_cache("sweep", &lq)?;
    let tiles = scales
        .iter()
        .map(|s| bundle.blend_from_cache(&cache, *s))
        .collect::<dualsr_core::Result<Vec<_>>>()?;
    let grid = tile_grid(&tiles, pix.len(), sem.len(), 2)?;
    grid.save_png(run.reports().join("sweep.png"))?;
    if let Some(gt) = gt {
        let report = evaluate(&[(lq, gt)], &bundle, &scales)?;
        let csv = report.to_csv();
        std::fs::write(run.reports().join("sweep.csv"), &csv)?;
        print!("{csv}");
    }
    Ok(())
}

/// Arranges equally sized images into a `rows x cols` grid.
pub fn tile_grid(tiles: &[ImageTensor], rows: usize, cols: usize, gutter: usize) -> CliResult<ImageTensor> {
    let (_, h, w) = tiles
        .first()
        .map(ImageTensor::dims)
        .ok_or_else(|| CliError::Usage("empty sweep".into()))?;
    if tiles.len() != rows * cols {
        return Err(CliError::Failed(format!("{} tiles for a {rows}x{cols} grid", tiles.len())));
    }
    let gh = rows * h + (rows - 1) * gutter;
    let gw = cols * w + (cols - 1) * gutter;
    let mut data = vec![1.0; 3 * gh * gw];
    for (k, tile) in tiles.iter().enumerate() {
        let v = tile.clamped()?.to_vec()?;
        let (oy, ox) = ((k / cols) * (h + gutter), (k % cols) * (w + gutter));
        for c in 0..3 {
            for y in 0..h {
                let src = &v[c * h * w + y * w..c * h * w + (y + 1) * w];
                let dst = c * gh * gw + (oy + y) * gw + ox;
                data[dst..dst + w].copy_from_slice(src);
            }
        }
    }
    Ok(ImageTensor::from_vec(data, 1, gh, gw)?)
}

/// PNG bytes of one restoration. With scales this is the two-pass
/// adjustable path, otherwise the merged single pass.
pub fn restore_bytes(bundle: &Bundle, lq: &ImageTensor, scales: Option<GuidanceScales>) -> CliResult<Vec<u8>> {
    let out = match scales {
        Some(s) => bundle.restore_adjustable(lq, s)?,
        None => bundle.restore_default(lq)?,
    };
    Ok(out.encode_png()?)
}

pub fn restore(_cfg: &CliConfig, run: &RunDir, args: &RestoreArgs) -> CliResult<()> {
    let scales = args.scales.as_deref().map(crate::parse_scales).transpose()?;
    let (bundle, _) = load_bundle(run, args.ckpt.checkpoint.as_deref())?;
    let lq = ImageTensor::load_png(&args.input)?;
    let bytes = restore_bytes(&bundle, &lq, scales)?;
    if let Some(dir) = args.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&args.output, bytes)?;
    log::info!("wrote {}", args.output.display());
    Ok(())
}

pub fn serve(cfg: &CliConfig, run: &RunDir, args: &ServeArgs) -> CliResult<()> {
    let path = args
        .ckpt
        .checkpoint
        .clone()
        .unwrap_or_else(|| run.checkpoint("stage2"));
    let path = require(path, "train-sem")?;
    let addr_text = args.addr.clone().unwrap_or_else(|| cfg.serve.addr.clone());
    let addr: std::net::SocketAddr = addr_text
        .parse()
        .map_err(|_| CliError::Usage(format!("bad listen address `{addr_text}`")))?;
    let state = dualsr_serve::AppState::new(cfg.service_config());
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let loader = {
            let state = state.clone();
            tokio::task::spawn_blocking(move || -> CliResult<()> {
                let ck = Checkpoint::load(&path)?;
                state.warm(ck.bundle()?, &ck.build_tag);
                log::info!("model loaded from {}", path.display());
                Ok(())
            })
        };
        let server = dualsr_serve::serve(addr, state);
        tokio::pin!(server);
        tokio::select! {
            r = &mut server => r.map_err(CliError::from),
            loaded = loader => {
                loaded.map_err(|e| CliError::Failed(e.to_string()))??;
                server.await.map_err(CliError::from)
            }
        }
    })
}
