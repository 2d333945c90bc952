use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use lapformer_core::config::KeyValues;
use lapformer_core::data::{
    gen_texture_dataset, generate_sample, load_dataset, load_image, read_tensor, save_dataset, write_tensor, Dataset,
    DatasetManifest, SampleRecord,
};
use lapformer_core::model::{Ablation, Checkpoint, LaplacianFormer};
use lapformer_core::pyramid::build_pyramid;
use lapformer_core::spectral::layerwise_probe;
use lapformer_core::training::{evaluate, Trainer};
use lapformer_core::{Error, GaussianSpec, Tensor};

use crate::run::{DataSource, RunConfig};
use crate::Failure;

type Outcome = std::result::Result<(), Failure>;

pub const CONFIG_SNAPSHOT: &str = "config.cfg";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOCK_FILE: &str = "run.lock";

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn create_dir(path: &Path) -> Outcome {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// Holds `run.lock` in an output directory until dropped.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> std::result::Result<Self, Failure> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Failure::config(format!(
                "{} is locked by another run; remove {} if that run is gone",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::Io { path, source: e }.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn load_run(config: &Path) -> std::result::Result<RunConfig, Failure> {
    Ok(RunConfig::load(config)?)
}

fn dataset(run: &RunConfig) -> std::result::Result<Dataset, Failure> {
    let d = match &run.data {
        DataSource::Dir(dir) => load_dataset(dir)?,
        _ => gen_texture_dataset(&run.manifest()?)?,
    };
    let m = &run.model;
    if d.manifest.height != m.height || d.manifest.width != m.width || d.manifest.num_classes != m.num_classes {
        return Err(Failure::config(format!(
            "dataset is {}x{} with {} classes but the model expects {}x{} with {}",
            d.manifest.height, d.manifest.width, d.manifest.num_classes, m.height, m.width, m.num_classes
        )));
    }
    Ok(d)
}

fn require_file(path: &Path, what: &str) -> Outcome {
    if !path.is_file() {
        return Err(Failure::config(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

/// Model built from `run` with the checkpoint's parameters; names and
/// shapes must agree.
fn model_from(run: &RunConfig, checkpoint: &Path) -> std::result::Result<LaplacianFormer<f32>, Failure> {
    require_file(checkpoint, "checkpoint")?;
    let mut model = LaplacianFormer::<f32>::new(run.model.clone(), run.train.seed)?;
    model.load_params(checkpoint)?;
    Ok(model)
}

fn read_input(path: &Path) -> std::result::Result<Tensor<f32>, Failure> {
    require_file(path, "input")?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let t = match ext.as_str() {
        "png" | "jpg" | "jpeg" | "bmp" | "pgm" | "ppm" => load_image(path)?,
        _ => read_tensor::<f32>(path)?,
    };
    Ok(match *t.shape() {
        [h, w] => t.reshape(&[h, w, 1])?,
        _ => t,
    })
}

pub fn gen_data(manifest: Option<&Path>, out: &Path, seed: Option<u64>, train: Option<usize>, test: Option<usize>) -> Outcome {
    let kv = match manifest {
        Some(p) => {
            require_file(p, "manifest")?;
            KeyValues::load(p)?
        }
        None => KeyValues::default(),
    };
    let mut m = DatasetManifest::from_kv(&kv)?;
    if let Some(s) = seed {
        m.seed = s;
    }
    if let Some(n) = train {
        m.train = n;
    }
    if let Some(n) = test {
        m.test = n;
    }
    let d = gen_texture_dataset(&m)?;
    save_dataset(out, &d)?;
    println!("wrote {} train and {} test samples to {}", d.train.len(), d.test.len(), out.display());
    Ok(())
}

pub fn train(
    config: &Path,
    out: Option<PathBuf>,
    epochs: Option<usize>,
    seed: Option<u64>,
    ablate: &[String],
    resume: bool,
) -> Outcome {
    require_file(config, "config")?;
    let mut run = load_run(config)?;
    if let Some(e) = epochs {
        run.set("epochs", e)?;
    }
    if let Some(s) = seed {
        run.set("seed", s)?;
    }
    for flag in ablate {
        if !Ablation::FLAGS.contains(&flag.as_str()) {
            return Err(Failure::config(format!(
                "unknown ablation `{flag}`; expected one of {}",
                Ablation::FLAGS.join(", ")
            )));
        }
        run.set(flag, true)?;
    }
    if let Some(o) = out {
        run.out = Some(o);
    }
    let out = run
        .out
        .clone()
        .ok_or_else(|| Failure::config("no output directory: pass --out or set `out`"))?;
    let data = dataset(&run)?;
    create_dir(&out)?;
    let _lock = RunLock::acquire(&out)?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let metrics_path = out.join(METRICS_FILE);

    let mut trainer = if resume {
        require_file(&ckpt_path, "checkpoint")?;
        let ckpt = Checkpoint::<f32>::load(&ckpt_path)?;
        if ckpt.config != run.model {
            return Err(Failure::config("checkpoint model configuration differs from the run configuration"));
        }
        Trainer::resume(&ckpt, run.train.clone())?
    } else {
        let model = LaplacianFormer::<f32>::new(run.model.clone(), run.train.seed)?;
        Trainer::new(model, run.train.clone())?
    };
    write_file(&out.join(CONFIG_SNAPSHOT), run.snapshot.to_string())?;
    let metrics = if resume {
        OpenOptions::new().append(true).create(true).open(&metrics_path)
    } else {
        File::create(&metrics_path)
    };
    let mut metrics = metrics.map_err(|e| Error::Io {
        path: metrics_path.clone(),
        source: e,
    })?;
    if !resume {
        trainer.checkpoint().save(&ckpt_path)?;
    }

    let every = run.checkpoint_every.max(1) as u64;
    let total = run.train.epochs as u64;
    trainer.fit(&data.train, &data.test, |t, rec| {
        writeln!(metrics, "{}", rec.to_json()).map_err(|e| Error::Io {
            path: metrics_path.clone(),
            source: e,
        })?;
        if !rec.loss.is_finite() || !rec.eval.loss.is_finite() {
            return Err(Error::Numerical(format!("epoch {} produced a non-finite loss", rec.epoch)));
        }
        let done = t.epoch();
        if done % every == 0 || done == total {
            t.checkpoint().save(&ckpt_path)?;
        }
        eprintln!(
            "epoch {} loss {:.4} dice {:.4} hd {:.2}",
            rec.epoch, rec.loss, rec.eval.dice, rec.eval.hd
        );
        Ok(())
    })?;
    Ok(())
}

fn split<'a>(data: &'a Dataset, name: &str) -> std::result::Result<&'a [SampleRecord], Failure> {
    match name {
        "train" => Ok(&data.train),
        "test" => Ok(&data.test),
        other => Err(Failure::config(format!("unknown split `{other}`; use train or test"))),
    }
}

pub fn eval(config: &Path, checkpoint: &Path, split_name: &str, out: Option<&Path>) -> Outcome {
    require_file(config, "config")?;
    let run = load_run(config)?;
    let model = model_from(&run, checkpoint)?;
    let data = dataset(&run)?;
    let samples = split(&data, split_name)?;
    let m = evaluate(&model, samples, &run.train.loss, run.train.hd95)?;
    let json = serde_json::json!({
        "split": split_name,
        "samples": samples.len(),
        "loss": m.loss,
        "dice": m.dice,
        "hd": m.hd,
        "se": m.se,
        "sp": m.sp,
        "acc": m.acc,
    });
    let text = serde_json::to_string_pretty(&json).map_err(Failure::io)?;
    println!("{text}");
    if let Some(p) = out {
        write_file(p, format!("{text}\n"))?;
    }
    Ok(())
}

fn probe_images(run: &RunConfig) -> std::result::Result<Vec<Tensor<f32>>, Failure> {
    let data = dataset(run)?;
    let imgs: Vec<_> = data.test.iter().take(run.probe_samples).map(|s| s.image.clone()).collect();
    if imgs.is_empty() {
        return Err(Failure::config("no test samples to probe"));
    }
    Ok(imgs)
}

fn stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string()
}

pub fn spectra(config: &Path, a: &Path, b: &Path, out: &Path, cutoff: f64) -> Outcome {
    require_file(config, "config")?;
    let run = load_run(config)?;
    require_file(a, "checkpoint")?;
    require_file(b, "checkpoint")?;
    let imgs = probe_images(&run)?;
    create_dir(out)?;
    for (prefix, path) in [("a", a), ("b", b)] {
        let ckpt = Checkpoint::<f32>::load(path)?;
        let model = ckpt.build_model()?;
        let report = layerwise_probe(&model, &imgs, &stem(path), cutoff)?;
        report.write(out, prefix)?;
        println!("{prefix}: {} ({} layers) -> {}", path.display(), report.rows.len(), out.join(format!("{prefix}.csv")).display());
    }
    Ok(())
}

fn parse_sigmas(text: &str) -> std::result::Result<GaussianSpec, Failure> {
    let sigmas = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Failure::config(format!("bad sigma list `{text}`: {e}")))?;
    Ok(GaussianSpec::new(sigmas)?)
}

pub fn pyramid_dump(input: &Path, out: &Path, sigmas: &str) -> Outcome {
    let spec = parse_sigmas(sigmas)?;
    let x = read_input(input)?;
    let stack = build_pyramid(&x, &spec)?;
    create_dir(out)?;
    for (l, band) in stack.bands.iter().enumerate() {
        write_tensor(out.join(format!("band{l}.bin")), band)?;
    }
    write_tensor(out.join("residual.bin"), &stack.residual)?;
    println!("wrote {} bands and the residual to {}", stack.bands.len(), out.display());
    Ok(())
}

pub fn attn_probe(
    config: &Path,
    checkpoint: Option<&Path>,
    input: Option<&Path>,
    stage: usize,
    layer: usize,
    out: &Path,
) -> Outcome {
    require_file(config, "config")?;
    let run = load_run(config)?;
    let model = match checkpoint {
        Some(c) => model_from(&run, c)?,
        None => LaplacianFormer::<f32>::new(run.model.clone(), run.train.seed)?,
    };
    let img = match input {
        Some(p) => read_input(p)?,
        None => {
            let m = run.manifest()?;
            generate_sample(&m, m.train as u64)?.image
        }
    };
    let probe = model.attention_probe(&img, stage, layer)?;
    create_dir(out)?;
    write_tensor(out.join("efficient.bin"), &probe.efficient)?;
    write_tensor(out.join("frequency.bin"), &probe.frequency)?;
    write_tensor(out.join("fused.bin"), &probe.fused)?;
    write_tensor(out.join("efficient_context.bin"), &probe.efficient_context)?;
    for (l, c) in probe.level_contexts.iter().enumerate() {
        write_tensor(out.join(format!("level{l}_context.bin")), c)?;
    }
    println!("wrote stage {stage} layer {layer} probe to {}", out.display());
    Ok(())
}
