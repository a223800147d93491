//! One function per subcommand. Each reads only its config and input files
//! and writes only into its output directory.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use dgfn_core::archive::TensorArchive;
use dgfn_core::data::derive_seed;
use dgfn_core::dataset::{
    load_directory, manifest_entries, materialize, read_manifest, write_heatmap, write_manifest,
    write_pgm, LABELS_FILE,
};
use dgfn_core::experiments::synth_samples;
use dgfn_core::metrics::label_names;
use dgfn_core::train::{evaluate, train, Sample, LOG_HEADER, STREAM_INIT};
use dgfn_core::{GaborBank, ModelSpec, Network, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ConfigError, RunConfig};

/// First synthetic bag index of each split; the ranges never overlap.
pub const TRAIN_START: u64 = 0;
pub const VAL_START: u64 = 500_000;
pub const EVAL_START: u64 = 1_000_000;

pub const CHECKPOINT_INITIAL: &str = "initial.dgft";
pub const CHECKPOINT_BEST: &str = "best.dgft";
pub const CHECKPOINT_LAST: &str = "last.dgft";

#[derive(Debug)]
pub enum CliError {
    /// A check ran and did not pass.
    Check(String),
    Config(ConfigError),
    Core(dgfn_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Config(_) => 2,
            CliError::Core(dgfn_core::Error::NonFinite(_)) => 3,
            CliError::Core(dgfn_core::Error::Shape(_)) => 4,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Check(m) => write!(f, "check failed: {m}"),
            CliError::Config(e) => write!(f, "config error: {e}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<dgfn_core::Error> for CliError {
    fn from(e: dgfn_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Core(dgfn_core::Error::Io(e)))
}

fn init_network(cfg: &RunConfig) -> CliResult<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.optim.seed, STREAM_INIT));
    Ok(Network::new(&cfg.model, &mut rng)?)
}

/// A split from a directory, a manifest file, or the synthetic generator.
fn load_split(
    cfg: &RunConfig,
    path: Option<&Path>,
    start: u64,
    count: usize,
) -> CliResult<Vec<Sample>> {
    let samples = match path {
        Some(p) if p.is_dir() => load_directory(p)?,
        Some(p) => materialize(&cfg.data.synthetic, &read_manifest(p)?)?,
        None if count == 0 => Vec::new(),
        None => synth_samples(&cfg.data.synthetic, start, count)?,
    };
    if let Some(s) = samples.iter().find(|s| s.labels.len() != cfg.model.labels) {
        return Err(CliError::Core(dgfn_core::Error::Shape(format!(
            "bags carry {} labels, the model predicts {}",
            s.labels.len(),
            cfg.model.labels
        ))));
    }
    Ok(samples)
}

pub fn gradcheck(cfg: &RunConfig) -> CliResult<String> {
    let g = &cfg.gradcheck;
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let mut net = Network::new(&cfg.model, &mut rng)?;
    net.nudge_offsets(&mut rng)?;
    let image = Tensor::uniform(&[cfg.model.in_channels, g.size, g.size], 1.0, &mut rng)?
        .map(|v| 0.5 + 0.5 * v);
    let labels: Vec<u8> = (0..cfg.model.labels)
        .map(|_| u8::from(rng.gen_bool(0.5)))
        .collect();
    let report = net.grad_check(&image, &labels, None, cfg.mode, g.eps)?;

    let out = cfg.output_dir("gradcheck");
    create_dir(&out)?;
    fs::write(out.join("gradcheck.csv"), report.to_string())?;
    let failing = report.failing(g.tolerance);
    if !failing.is_empty() {
        let names: Vec<&str> = failing.iter().map(|b| b.name.as_str()).collect();
        return Err(CliError::Check(format!(
            "relative error >= {:e} in {} ({:?} mode)\n{report}",
            g.tolerance,
            names.join(", "),
            cfg.mode
        )));
    }
    Ok(format!(
        "{report}all {} blocks below {:e}\n",
        report.blocks.len(),
        g.tolerance
    ))
}

fn param_rows(spec: &ModelSpec, s: &mut String) -> CliResult<usize> {
    writeln!(
        s,
        "{:<8} {:<7} {:>9} {:>7} {:>9} {:>7} {:>9}",
        "layer", "kind", "filters", "masks", "offset", "bias", "total"
    )
    .unwrap();
    let rows = spec.param_table()?;
    for r in &rows {
        writeln!(
            s,
            "{:<8} {:<7} {:>9} {:>7} {:>9} {:>7} {:>9}",
            r.name,
            r.kind,
            r.filters,
            r.masks,
            r.offset,
            r.bias,
            r.total()
        )
        .unwrap();
    }
    let total: usize = rows.iter().map(|r| r.total()).sum();
    writeln!(s, "{:<8} {:<7} {:>9}", "total", "", total).unwrap();
    Ok(rows
        .iter()
        .filter(|r| r.kind != "head")
        .map(|r| r.filters)
        .sum())
}

fn widths_label(w: &[usize]) -> String {
    w.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
}

pub fn params(cfg: &RunConfig) -> CliResult<String> {
    let spec = &cfg.model;
    let mut s = format!("model widths {}\n", widths_label(&spec.widths));
    let filters = param_rows(spec, &mut s)?;
    if spec.uses_dgconv() {
        let plain = ModelSpec::plain(
            spec.matched_plain_widths(),
            spec.strides.clone(),
            spec.labels,
        );
        writeln!(
            s,
            "\nplain reference, widths {} (DGConv widths x sqrt(U))",
            widths_label(&plain.widths)
        )
        .unwrap();
        let plain_filters = param_rows(&plain, &mut s)?;
        writeln!(
            s,
            "\nconvolution filters: dgconv {filters}, plain {plain_filters}"
        )
        .unwrap();
    }
    Ok(s)
}

pub fn train_cmd(cfg: &RunConfig) -> CliResult<String> {
    let out = cfg.output_dir("train");
    create_dir(&out)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    let net = init_network(cfg)?;
    net.to_archive()?.save(out.join(CHECKPOINT_INITIAL))?;
    if cfg.optim.epochs == 0 {
        return Ok(format!(
            "wrote {}\n",
            out.join(CHECKPOINT_INITIAL).display()
        ));
    }
    let d = &cfg.data;
    let train_set = load_split(cfg, d.train.as_deref(), TRAIN_START, d.train_bags)?;
    let val_set = load_split(cfg, d.val.as_deref(), VAL_START, d.val_bags)?;

    let mut log = fs::File::create(out.join("log.csv"))?;
    writeln!(log, "{LOG_HEADER}")?;
    println!("{LOG_HEADER}");
    let outcome = train(
        net,
        &train_set,
        &val_set,
        &cfg.optim,
        &cfg.train_options(),
        |rec, _| {
            let row = rec.csv_row();
            println!("{row}");
            writeln!(log, "{row}")?;
            Ok(())
        },
    )?;
    outcome.best.to_archive()?.save(out.join(CHECKPOINT_BEST))?;
    outcome.last.to_archive()?.save(out.join(CHECKPOINT_LAST))?;
    Ok(format!(
        "best epoch {}, checkpoints in {}\n",
        outcome.best_epoch,
        out.display()
    ))
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path) -> CliResult<String> {
    let mut net = init_network(cfg)?;
    net.load_archive(&TensorArchive::load(checkpoint)?)?;
    let samples = load_split(
        cfg,
        cfg.data.eval.as_deref(),
        EVAL_START,
        cfg.data.eval_bags,
    )?;
    if samples.is_empty() {
        return Err(ConfigError("evaluation set is empty".into()).into());
    }
    let e = evaluate(&net, &samples, None)?;
    let names = label_names(cfg.model.labels);

    let out = cfg.output_dir("eval");
    let maps = out.join("heatmaps");
    create_dir(&maps)?;
    fs::write(out.join("auc.csv"), e.report.to_csv())?;
    let mut scores = format!("bag,{}\n", names.join(","));
    for i in 0..samples.len() {
        let row: Vec<String> = e.scores.iter().map(|c| format!("{:.10}", c[i])).collect();
        writeln!(scores, "{i},{}", row.join(",")).unwrap();
    }
    fs::write(out.join("scores.csv"), scores)?;
    for (i, s) in samples.iter().take(cfg.eval.heatmaps).enumerate() {
        let p = net.predict(&s.image)?;
        for (c, name) in names.iter().enumerate() {
            write_heatmap(
                &maps,
                &format!("bag{i:05}_{name}"),
                &p.heatmap(c),
                cfg.eval.upscale,
            )?;
        }
    }

    let mut s = format!(
        "{} bags, mean loss {:.6}\n\n{}\n",
        samples.len(),
        e.mean_loss,
        e.report.to_markdown()
    );
    writeln!(s, "| Label | Accuracy (%) |\n|---|---|").unwrap();
    for (name, a) in names.iter().zip(&e.accuracy) {
        writeln!(s, "| {name} | {:.2} |", 100.0 * a).unwrap();
    }
    writeln!(s, "| Average | {:.2} |", 100.0 * e.mean_accuracy()).unwrap();
    Ok(s)
}

pub fn dump_gabor(cfg: &RunConfig) -> CliResult<String> {
    let (sigma, lambda) = cfg.model.gabor_params();
    let (u, h) = (cfg.model.orientations, cfg.model.kernel);
    let bank = GaborBank::new(u, h, sigma, lambda)?;
    let out = cfg.output_dir("dump-gabor");
    create_dir(&out)?;
    let mut s = format!("U={u} H={h} sigma={sigma} lambda={lambda}\nfilter,angle_rad\n");
    for i in 0..u {
        let f = Tensor::from_vec(&[h, h], bank.filter(i).to_vec())?;
        fs::write(out.join(format!("filter{i}.csv")), f.to_csv()?)?;
        // signed values shown around mid-gray
        let m = f.max_abs().max(f64::MIN_POSITIVE);
        write_pgm(
            out.join(format!("filter{i}.pgm")),
            &f.map(|v| 0.5 + 0.5 * v / m),
            1.0,
            16,
        )?;
        writeln!(s, "{i},{:.6}", bank.angle(i)).unwrap();
    }
    Ok(s)
}

fn write_split(
    cfg: &RunConfig,
    dir: &Path,
    start: u64,
    count: usize,
    images: bool,
) -> CliResult<()> {
    create_dir(dir)?;
    let entries = manifest_entries(&cfg.data.synthetic, start, count)?;
    write_manifest(dir.join("manifest.csv"), &entries)?;
    if !images {
        return Ok(());
    }
    let mut labels = String::from("file,labels\n");
    let max = cfg.data.synthetic.max_intensity;
    for (e, s) in entries
        .iter()
        .zip(materialize(&cfg.data.synthetic, &entries)?)
    {
        let name = format!("bag{:07}.pgm", e.index);
        let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
        write_pgm(dir.join(&name), &s.image.reshape(&[h, w])?, max, 1)?;
        let l: Vec<String> = e.labels.iter().map(u8::to_string).collect();
        writeln!(labels, "{name},{}", l.join(";")).unwrap();
    }
    fs::write(dir.join(LABELS_FILE), labels)?;
    Ok(())
}

pub fn make_dataset(cfg: &RunConfig, images: bool) -> CliResult<String> {
    let out = cfg.output_dir("make-dataset");
    let d = &cfg.data;
    let mut s = String::new();
    for (name, start, count) in [
        ("train", TRAIN_START, d.train_bags),
        ("val", VAL_START, d.val_bags),
        ("eval", EVAL_START, d.eval_bags),
    ] {
        let dir: PathBuf = out.join(name);
        write_split(cfg, &dir, start, count, images)?;
        writeln!(s, "{name}: {count} bags in {}", dir.display()).unwrap();
    }
    Ok(s)
}
