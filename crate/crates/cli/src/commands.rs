use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::Args;
use hicssm::data::{
    self, balance, downsample_reads, extract_patches_sized, format_map, load_map, normalize_values, read_patch_set,
    reassemble, write_atomic, write_patch_set, ContactMap, Manifest, MapFormat, Split,
};
use hicssm::metrics::{self, LoopSets};
use hicssm::network::{self, ConvBaseline, Model};
use hicssm::training::{self, Dataset};
use hicssm::Tensor;

use crate::config::RunConfig;
use crate::ConfigArgs;

fn push<T: ToString>(out: &mut Vec<(&'static str, String)>, key: &'static str, v: &Option<T>) {
    if let Some(v) = v {
        out.push((key, v.to_string()));
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of bins.
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub tads: Option<usize>,
    #[arg(long)]
    pub loops: Option<usize>,
    /// Expected diagonal count outside TADs.
    #[arg(long)]
    pub depth: Option<f64>,
    /// Chromosome label; defaults to the output file stem.
    #[arg(long)]
    pub chrom: Option<String>,
    #[arg(long, default_value = "coo")]
    pub format: MapFormat,
    #[command(flatten)]
    pub common: ConfigArgs,
}

impl SynthArgs {
    pub fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut o = Vec::new();
        push(&mut o, "synth_tads", &self.tads);
        push(&mut o, "synth_loops", &self.loops);
        push(&mut o, "synth_depth", &self.depth);
        o
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("map").to_owned()
}

pub fn synth(a: &SynthArgs, cfg: &RunConfig) -> Result<()> {
    let mut params = cfg.synth.clone();
    params.chrom = a.chrom.clone().unwrap_or_else(|| stem(&a.out));
    let s = data::synthesize_map(a.n, a.seed, &params)?;
    write_atomic(&a.out, format_map(&s.map, a.format).as_bytes())
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "wrote {} x {} map to {} ({} TADs, {} loops)",
        a.n,
        a.n,
        a.out.display(),
        s.tads.len(),
        s.loops.len()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Read downsampling ratio for the low-coverage input.
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Chromosome label; defaults to the input file stem.
    #[arg(long)]
    pub chrom: Option<String>,
    /// Force a split instead of assigning one from the chromosome label.
    #[arg(long)]
    pub split: Option<Split>,
    #[command(flatten)]
    pub common: ConfigArgs,
}

impl PreprocessArgs {
    pub fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut o = Vec::new();
        push(&mut o, "ratio", &self.ratio);
        push(&mut o, "data_seed", &self.seed);
        o
    }
}

fn read_map(path: &Path) -> Result<ContactMap> {
    load_map(path, None).with_context(|| format!("reading {}", path.display()))
}

pub fn preprocess(a: &PreprocessArgs, cfg: &RunConfig) -> Result<()> {
    let mut raw = read_map(&a.input)?;
    if let Some(c) = &a.chrom {
        raw.set_chrom(c.clone());
    }
    let chrom = raw.chrom().to_owned();
    let split = a.split.unwrap_or_else(|| data::assign_split(&chrom, &cfg.split));
    let size = cfg.model.side;

    let balanced = balance(&raw, cfg.balance_tol, cfg.balance_max_iter)?;
    let low = normalize_values(&downsample_reads(&balanced, cfg.ratio, cfg.data_seed)?)?;
    let high = normalize_values(&balanced)?;
    let inputs = extract_patches_sized(&low.map, size)?;
    let targets = extract_patches_sized(&high.map, size)?;

    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let (in_name, tg_name) = (format!("{chrom}.inputs.bin"), format!("{chrom}.targets.bin"));
    for (name, set) in [(&in_name, &inputs), (&tg_name, &targets)] {
        let mut bytes = Vec::new();
        write_patch_set(set, &mut bytes)?;
        write_atomic(&a.out_dir.join(name), &bytes)?;
    }
    let manifest = Manifest {
        chrom: chrom.clone(),
        split,
        ratio: cfg.ratio,
        seed: cfg.data_seed,
        n: raw.n(),
        bin_size: raw.bin_size(),
        patch_size: size,
        input_scale: low.scale,
        target_scale: high.scale,
        inputs: in_name,
        targets: tg_name,
        origins: inputs.patches.iter().map(|p| (p.row_block, p.col_block)).collect(),
    };
    write_atomic(
        &a.out_dir.join(format!("{chrom}.manifest")),
        manifest.render().as_bytes(),
    )?;
    println!("{chrom}: {} patch pairs, split {split}", inputs.patches.len());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory written by `preprocess`.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path for the best model.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss history CSV; defaults to the checkpoint path with `.history.csv`.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Continue from an existing checkpoint instead of a fresh model.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: ConfigArgs,
}

impl TrainArgs {
    pub fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut o = Vec::new();
        push(&mut o, "epochs", &self.epochs);
        push(&mut o, "learning_rate", &self.learning_rate);
        push(&mut o, "batch_size", &self.batch_size);
        push(&mut o, "seed", &self.seed);
        o
    }
}

fn read_archive(path: &Path) -> Result<data::PatchSet> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_patch_set(std::io::BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

/// Training and validation pairs from every manifest in `dir`, in file
/// name order.
fn load_pairs(dir: &Path, side: usize) -> Result<(Dataset, Dataset)> {
    let mut manifests: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "manifest"))
        .collect();
    manifests.sort();
    let (mut train, mut val) = (Dataset::default(), Dataset::default());
    for path in manifests {
        let text = fs::read_to_string(&path)?;
        let m = Manifest::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
        if m.split == Split::Test {
            continue;
        }
        ensure!(
            m.patch_size == side,
            "{} holds {}-bin patches but the model expects {side}",
            path.display(),
            m.patch_size
        );
        let inputs = read_archive(&dir.join(&m.inputs))?;
        let targets = read_archive(&dir.join(&m.targets))?;
        ensure!(
            inputs.patches.len() == targets.patches.len(),
            "{}: archives differ in length",
            path.display()
        );
        let dst = if m.split == Split::Train { &mut train } else { &mut val };
        dst.inputs.extend(inputs.patches.into_iter().map(|p| p.values));
        dst.targets.extend(targets.patches.into_iter().map(|p| p.values));
    }
    if train.is_empty() {
        bail!("no training patches under {}", dir.display());
    }
    Ok((train, val))
}

pub fn train(a: &TrainArgs, cfg: &RunConfig) -> Result<()> {
    let model = match &a.resume {
        Some(p) => network::load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?,
        None => Model::new(cfg.model.clone(), cfg.model_seed)?,
    };
    let (train_set, val_set) = load_pairs(&a.data, model.config().side)?;
    let mut tc = cfg.train.clone();
    tc.checkpoint_path = Some(a.out.clone());
    let val = (!val_set.is_empty()).then_some(&val_set);
    let outcome = training::train(model, &train_set, val, &tc)?;

    let history = a.history.clone().unwrap_or_else(|| a.out.with_extension("history.csv"));
    let mut csv = Vec::new();
    training::write_history_csv(&outcome.history, &mut csv)?;
    write_atomic(&history, &csv)?;
    let last = outcome.history.last();
    println!(
        "trained {} epochs on {} pairs ({} validation); best epoch {}; final train L1 {:.6}",
        outcome.history.len(),
        train_set.len(),
        val_set.len(),
        outcome.best_epoch,
        last.map_or(f64::NAN, |r| r.train_l1)
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "coo")]
    pub format: MapFormat,
    /// Treat the input as already balanced.
    #[arg(long)]
    pub skip_balance: bool,
    /// Multiply the output by the input's normalization scale.
    #[arg(long)]
    pub denormalize: bool,
    #[command(flatten)]
    pub common: ConfigArgs,
}

/// Runs `model` over every patch of an already normalized map and
/// reassembles a symmetric map with values in `[0, 1]`.
pub fn enhance_map(model: &Model, map: &ContactMap) -> Result<ContactMap> {
    let patches = extract_patches_sized(map, model.config().side)?;
    let preds = patches
        .patches
        .iter()
        .map(|p| model.forward(&p.values))
        .collect::<hicssm::Result<Vec<Tensor>>>()?;
    let out = reassemble(&patches.with_values(preds)?)?;
    let clamped = metrics::clamp_unit(out.counts());
    Ok(ContactMap::new(out.n(), clamped, out.bin_size(), out.chrom())?)
}

pub fn enhance(a: &EnhanceArgs, cfg: &RunConfig) -> Result<()> {
    let model = network::load_checkpoint(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let raw = read_map(&a.input)?;
    let balanced = if a.skip_balance {
        raw
    } else {
        balance(&raw, cfg.balance_tol, cfg.balance_max_iter)?
    };
    let norm = normalize_values(&balanced)?;
    let mut out = enhance_map(&model, &norm.map)?;
    if a.denormalize {
        out = data::denormalize_values(&out, norm.scale)?;
    }
    write_atomic(&a.out, format_map(&out, a.format).as_bytes())?;
    println!("wrote {} x {} enhanced map to {}", out.n(), out.n(), a.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Metric report CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Distance-stratified PCC CSV.
    #[arg(long)]
    pub distance_out: Option<PathBuf>,
    #[arg(long)]
    pub max_distance: Option<usize>,
    /// Scale both maps to `[0, 1]` before comparing. Maps with values above
    /// 1 are always scaled.
    #[arg(long)]
    pub normalize: bool,
    #[command(flatten)]
    pub common: ConfigArgs,
}

impl EvaluateArgs {
    pub fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut o = Vec::new();
        push(&mut o, "max_distance", &self.max_distance);
        o
    }
}

pub fn evaluate(a: &EvaluateArgs, cfg: &RunConfig) -> Result<()> {
    let (mut pred, mut target) = (read_map(&a.pred)?, read_map(&a.target)?);
    ensure!(
        pred.n() == target.n(),
        "maps differ in size: {} vs {}",
        pred.n(),
        target.n()
    );
    for m in [&mut pred, &mut target] {
        if a.normalize || m.counts().iter().any(|v| *v > 1.0) {
            *m = normalize_values(m)?.map;
        }
    }
    let size = cfg.model.side.min(pred.n());
    let (pp, tp) = (
        extract_patches_sized(&pred, size)?,
        extract_patches_sized(&target, size)?,
    );
    let preds: Vec<Tensor> = pp.patches.into_iter().map(|p| p.values).collect();
    let targets: Vec<Tensor> = tp.patches.into_iter().map(|p| p.values).collect();
    let mut report = metrics::evaluate(&preds, &targets)?;
    if cfg.ssim_window > 0 {
        let mut total = 0.0;
        for (p, t) in preds.iter().zip(&targets) {
            total += metrics::ssim_windowed(&metrics::clamp_unit(p.data()), t.data(), size, cfg.ssim_window)?;
        }
        report.ssim = total / preds.len() as f64;
    }
    report.per_distance = metrics::pcc_by_distance(&pred, &target, cfg.max_distance)?;
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        write_atomic(out, report.to_csv().as_bytes())?;
    }
    if let Some(out) = &a.distance_out {
        write_atomic(out, metrics::distance_csv(&report.per_distance).as_bytes())?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct FlopsArgs {
    #[arg(long)]
    pub side: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    /// Print the per-layer breakdown before the total.
    #[arg(long)]
    pub detail: bool,
    #[command(flatten)]
    pub common: ConfigArgs,
}

impl FlopsArgs {
    pub fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut o = Vec::new();
        push(&mut o, "side", &self.side);
        push(&mut o, "channels", &self.channels);
        o
    }
}

pub fn flops(a: &FlopsArgs, cfg: &RunConfig) -> Result<()> {
    let report = network::count_flops(&cfg.model)?;
    if a.detail {
        let width = report.entries.iter().map(|e| e.layer.len()).max().unwrap_or(0);
        for e in &report.entries {
            println!(
                "{:<width$}  {:<4}  {}",
                e.layer,
                format!("{:?}", e.kind).to_lowercase(),
                e.flops
            );
        }
    }
    println!("{:.6}", report.gflops());
    Ok(())
}

#[derive(Args, Debug)]
pub struct ErfArgs {
    /// Checkpoint to analyse; a freshly initialized model otherwise.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// CSV grid output.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Output pixel as `row,col`; defaults to the centre.
    #[arg(long)]
    pub probe: Option<String>,
    /// Analyse the two-convolution baseline instead.
    #[arg(long)]
    pub baseline: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub common: ConfigArgs,
}

impl ErfArgs {
    pub fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut o = Vec::new();
        push(&mut o, "erf_samples", &self.samples);
        o
    }
}

fn parse_pair(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s.split_once(',').context("expected row,col")?;
    Ok((a.trim().parse()?, b.trim().parse()?))
}

pub fn erf(a: &ErfArgs, cfg: &RunConfig) -> Result<()> {
    let model = match &a.model {
        Some(p) => network::load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?,
        None => Model::new(cfg.model.clone(), cfg.model_seed)?,
    };
    let side = model.config().side;
    let probe = match &a.probe {
        Some(p) => parse_pair(p).with_context(|| format!("invalid --probe {p:?}"))?,
        None => (side / 2, side / 2),
    };
    let map = if a.baseline {
        let b = ConvBaseline::new(model.config().channels, side, cfg.model_seed);
        network::effective_receptive_field(&b, probe, cfg.erf_samples, a.seed)?
    } else {
        network::effective_receptive_field(&model, probe, cfg.erf_samples, a.seed)?
    };
    let mut csv = String::new();
    for row in map.data().chunks(side) {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    write_atomic(&a.out, csv.as_bytes())?;
    let nonzero = map.data().iter().filter(|v| **v > 0.0).count();
    println!(
        "{nonzero} of {} input pixels influence output ({}, {})",
        side * side,
        probe.0,
        probe.1
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct LoopscoreArgs {
    /// Overlap counts grouped by super-enhancer line, loop line varying
    /// fastest: `A(1,1),A(2,1),A(1,2),A(2,2)`.
    #[arg(long)]
    pub counts: String,
    /// Loop totals per cell line: `N1,N2`.
    #[arg(long)]
    pub totals: String,
    #[arg(long, default_value = "GM12878,K562")]
    pub lines: String,
    /// Score table CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: ConfigArgs,
}

fn parse_counts<const N: usize>(s: &str, what: &str) -> Result<[u64; N]> {
    let v: Vec<u64> = s
        .split(',')
        .map(|t| t.trim().parse::<u64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("invalid {what} {s:?}"))?;
    v.try_into()
        .map_err(|_| anyhow::anyhow!("{what} needs exactly {N} comma-separated integers"))
}

pub fn loopscore(a: &LoopscoreArgs, _cfg: &RunConfig) -> Result<()> {
    let counts = parse_counts::<4>(&a.counts, "--counts")?;
    let totals = parse_counts::<2>(&a.totals, "--totals")?;
    let names: Vec<&str> = a.lines.split(',').map(str::trim).collect();
    ensure!(names.len() == 2, "--lines needs two comma-separated names");
    let loops = LoopSets::from_counts([names[0].to_owned(), names[1].to_owned()], counts, totals)?;
    let rows = metrics::loop_weighted_score(&loops)?;
    print!("{}", metrics::loop_score_table(&rows));
    if let Some(out) = &a.out {
        let mut csv = String::from("super_enhancers,loops,overlap,total,proportion,weight\n");
        for r in &rows {
            let w = r.weight.map_or("undefined".into(), |w| w.to_string());
            csv.push_str(&format!(
                "{},{},{},{},{},{w}\n",
                r.enhancer_line, r.loop_line, r.overlap, r.total, r.proportion
            ));
        }
        write_atomic(out, csv.as_bytes())?;
    }
    Ok(())
}
