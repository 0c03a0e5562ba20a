//! Command-line front end. Every command reads one experiment config and
//! works inside its output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::adapters::CompositionMode;
use crate::compute::RngSeed;
use crate::config::{DataSource, ExperimentConfig, OUTPUT_ROOT_ENV};
use crate::data::{
    generate_synthetic, load_jsonl, save_jsonl, split, upsample, Dataset, EncodedDataset, Schema, SyntheticSpec,
};
use crate::encoder::Vocab;
use crate::error::{DamError, Result};
use crate::eval::{
    evaluate_run, evaluate_suite, fusion_attention_report, render_csv, render_markdown, EncodedSplits,
    LeakageReport, SuiteConfig,
};
use crate::persistence::{config_hash, load_bundle, load_model, read_manifest, save_bundle, Component};
use crate::training::{
    pretrain_encoder, prepare_stage, recipe_trainable_params, train_stage, DamModel, Recipe, Route, StageReport,
};

#[derive(Debug, Parser)]
#[command(name = "dam", version, about = "Debiasing adapters with adapter fusion")]
pub struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,

    /// Override a config key, e.g. `--set training.lr_fusion=0.001`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Root for relative output directories.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    pub output_root: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic dataset splits as JSONL plus a split manifest.
    GenerateData {
        /// Replace existing data files.
        #[arg(long)]
        force: bool,
    },
    /// Run the configured recipe for every seed, writing one bundle per
    /// stage and a final composed bundle.
    Train,
    /// Task accuracy and attacker leakage of the trained models.
    Eval {
        /// task_only or fused; fused for DAM and task_only otherwise.
        #[arg(long)]
        mode: Option<CompositionMode>,
        /// Attacked attributes, comma separated.
        #[arg(long, value_delimiter = ',')]
        attack: Vec<String>,
    },
    /// Fusion attention on a random sample of the test split.
    AttentionReport {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        sample_fraction: Option<f64>,
        #[arg(long)]
        top_n: Option<usize>,
        /// Skip the SVG chart.
        #[arg(long)]
        no_plot: bool,
    },
    /// Trainable parameter counts per recipe.
    Params,
    /// Render an attention CSV as an SVG bar chart.
    Plot {
        /// Defaults to the attention CSV of the first seed.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train and evaluate several recipes over all seeds in one table.
    Suite {
        #[arg(long, value_delimiter = ',')]
        recipes: Vec<Recipe>,
    },
}

/// File layout of an experiment's output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn split_file(&self, part: &str) -> PathBuf {
        self.data_dir().join(format!("{part}.jsonl"))
    }

    pub fn split_manifest(&self) -> PathBuf {
        self.data_dir().join("splits.json")
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.txt")
    }

    pub fn pretrained(&self) -> PathBuf {
        self.root.join("pretrained")
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }

    pub fn stage_dir(&self, seed: u64, index: usize, plan: &str) -> PathBuf {
        self.seed_dir(seed).join("stages").join(format!("{index}-{plan}"))
    }

    pub fn final_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("final")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn attention_csv(&self, seed: u64) -> PathBuf {
        self.reports().join(format!("attention-seed{seed}.csv"))
    }
}

/// Exclusive claim on an output directory for the lifetime of the value.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| DamError::io(dir, e))?;
        let path = dir.join(".dam.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(DamError::Config(format!(
                "{} is locked by another process (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(DamError::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub spec: SyntheticSpec,
    pub split_seed: u64,
    pub ratios: [f64; 3],
    pub counts: [usize; 3],
}

/// Loaded and encoded splits of an experiment.
pub struct PreparedData {
    pub schema: Schema,
    pub vocab: Vocab,
    pub encoded: EncodedSplits,
    pub test_texts: Vec<String>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| DamError::io(p, e))?;
    }
    fs::write(path, text).map_err(|e| DamError::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

pub fn generate_data(cfg: &ExperimentConfig, layout: &Layout, force: bool) -> Result<Vec<PathBuf>> {
    if cfg.data.source != DataSource::Synthetic {
        return Err(DamError::Config("generate-data needs data.source = \"synthetic\"".into()));
    }
    let files: Vec<PathBuf> = ["train", "val", "test"].iter().map(|p| layout.split_file(p)).collect();
    if !force && (files.iter().any(|f| f.exists()) || layout.split_manifest().exists()) {
        return Err(DamError::Config(format!(
            "data already present in {}; pass --force to replace it",
            layout.data_dir().display()
        )));
    }
    let ds = generate_synthetic(&cfg.data.synthetic)?;
    let parts = split(&ds, &cfg.data.split)?;
    fs::create_dir_all(layout.data_dir()).map_err(|e| DamError::io(layout.data_dir(), e))?;
    for (file, part) in files.iter().zip([&parts.train, &parts.val, &parts.test]) {
        save_jsonl(part, file)?;
    }
    let manifest = SplitManifest {
        spec: cfg.data.synthetic.clone(),
        split_seed: cfg.data.split.seed,
        ratios: cfg.data.split.ratios,
        counts: [parts.train.len(), parts.val.len(), parts.test.len()],
    };
    write_text(&layout.split_manifest(), &to_json(&manifest))?;
    let mut out = files;
    out.push(layout.split_manifest());
    Ok(out)
}

fn read_splits(cfg: &ExperimentConfig, layout: &Layout) -> Result<[Dataset; 3]> {
    let dir = match cfg.data.source {
        DataSource::Synthetic => layout.data_dir(),
        DataSource::Jsonl => cfg.data.dir.clone().expect("validated"),
    };
    let read = |part: &str| {
        let p = dir.join(format!("{part}.jsonl"));
        if !p.exists() {
            let hint = match cfg.data.source {
                DataSource::Synthetic => "; run generate-data first",
                DataSource::Jsonl => "",
            };
            return Err(DamError::Data(format!("{} not found{hint}", p.display())));
        }
        load_jsonl(&p)
    };
    Ok([read("train")?, read("val")?, read("test")?])
}

/// Reads the splits, builds the vocabulary from the training split when
/// `build_vocab` is set (reading `vocab.txt` otherwise) and encodes all
/// splits. The training split is upsampled when configured.
pub fn prepare_data(cfg: &ExperimentConfig, layout: &Layout, build_vocab: bool) -> Result<PreparedData> {
    let [train, val, test] = read_splits(cfg, layout)?;
    let schema = Schema::infer(&[&train, &val, &test]);
    let vocab = if build_vocab {
        let v = Vocab::build(train.examples.iter().map(|e| e.text.as_str()), cfg.encoder.vocab_size);
        v.save(&layout.vocab())?;
        v
    } else {
        if !layout.vocab().exists() {
            return Err(DamError::MissingCheckpoint(format!(
                "{} not found; run train first",
                layout.vocab().display()
            )));
        }
        Vocab::load(&layout.vocab())?
    };
    let train = if cfg.data.upsample {
        upsample(&train, &schema, cfg.data.split.seed)?
    } else {
        train
    };
    let attrs: Vec<String> = schema.attributes.keys().cloned().collect();
    let enc = |d: &Dataset| EncodedDataset::new(d, &vocab, cfg.encoder.max_seq_len, &attrs);
    let encoded = EncodedSplits {
        train: enc(&train)?,
        val: enc(&val)?,
        test: enc(&test)?,
    };
    Ok(PreparedData {
        schema,
        vocab,
        test_texts: test.examples.iter().map(|e| e.text.clone()).collect(),
        encoded,
    })
}

/// The frozen encoder every recipe starts from, warm-started once and cached
/// under `pretrained/` keyed by everything it depends on.
pub fn base_model(cfg: &ExperimentConfig, layout: &Layout, data: &PreparedData) -> Result<DamModel> {
    let key = config_hash(&to_json(&(
        &cfg.encoder,
        &cfg.adapter,
        &cfg.pretrain,
        &cfg.data,
        cfg.encoder_seed,
        &data.schema,
    )));
    let mut model = DamModel::new(
        cfg.encoder.clone(),
        cfg.adapter.clone(),
        data.schema.clone(),
        RngSeed(cfg.encoder_seed),
    )?;
    let dir = layout.pretrained();
    if let Ok(m) = read_manifest(&dir) {
        if m.config_hash == key {
            info!("reusing warm-started encoder from {}", dir.display());
            load_bundle(&mut model, &dir)?;
            return Ok(model);
        }
    }
    if let Some(r) = pretrain_encoder(
        &mut model,
        &cfg.pretrain,
        cfg.encoder_seed,
        &data.encoded.train,
        &data.encoded.val,
    )? {
        info!("encoder warm start: {} epochs in {:.1}s", r.epochs_run, r.wall_clock_secs);
    }
    save_bundle(&model, &[Component::Encoder], &dir, &key, cfg.encoder_seed)?;
    Ok(model)
}

fn save_with_config(
    model: &DamModel,
    components: &[Component],
    dir: &Path,
    cfg: &ExperimentConfig,
) -> Result<()> {
    save_bundle(model, components, dir, &cfg.hash(), cfg.encoder_seed)?;
    write_text(&dir.join("config.toml"), &cfg.to_toml())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedTraining {
    pub seed: u64,
    pub stages: Vec<StageReport>,
    pub final_bundle: PathBuf,
}

pub fn train(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<SeedTraining>> {
    let data = prepare_data(cfg, layout, true)?;
    let base = base_model(cfg, layout, &data)?;
    for a in &cfg.recipe.attributes {
        data.schema.attribute_classes(a)?;
    }
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let mut model = base.clone();
        let plans = cfg.training.plans(cfg.recipe.name, &data.schema, &cfg.recipe.attributes, seed)?;
        let mut stages = Vec::new();
        for (i, plan) in plans.iter().enumerate() {
            prepare_stage(&mut model, plan)?;
            let mut report = train_stage(&mut model, plan, &data.encoded.train, &data.encoded.val)?;
            let comps: Vec<Component> = Component::all_of(&model)
                .into_iter()
                .filter(|c| plan.trainable_groups.contains(&c.group_name()))
                .collect();
            let dir = layout.stage_dir(seed, i, &plan.name);
            save_with_config(&model, &comps, &dir, cfg)?;
            report.checkpoint = Some(dir.display().to_string());
            info!(
                "seed {seed} stage {}: {} epochs, kept epoch {}, {:.1}s",
                plan.name, report.epochs_run, report.best_epoch, report.wall_clock_secs
            );
            stages.push(report);
        }
        let final_dir = layout.final_dir(seed);
        save_with_config(&model, &Component::all_of(&model), &final_dir, cfg)?;
        write_text(&layout.seed_dir(seed).join("stages.json"), &to_json(&stages))?;
        out.push(SeedTraining {
            seed,
            stages,
            final_bundle: final_dir,
        });
    }
    Ok(out)
}

/// Route evaluated for a recipe in a composition mode.
pub fn route_for(recipe: Recipe, mode: CompositionMode) -> Result<Route> {
    Ok(match (recipe, mode) {
        (Recipe::Dam, CompositionMode::Fused) => Route::Fused,
        (Recipe::Dam, CompositionMode::TaskOnly) | (Recipe::Adp | Recipe::AdpDebias, CompositionMode::TaskOnly) => {
            Route::TaskAdapter
        }
        (Recipe::Ft | Recipe::FtDebias, CompositionMode::TaskOnly) => Route::Plain,
        (r, CompositionMode::Fused) => {
            return Err(DamError::MissingCheckpoint(format!(
                "fused mode needs a fusion bundle; recipe {r} trains none"
            )))
        }
    })
}

fn load_final(layout: &Layout, seed: u64) -> Result<DamModel> {
    load_model(&[layout.final_dir(seed)])
}

fn attacked(cfg: &ExperimentConfig, schema: &Schema, attack: &[String]) -> Result<Vec<String>> {
    let list: Vec<String> = if !attack.is_empty() {
        attack.to_vec()
    } else if !cfg.eval.attack.is_empty() {
        cfg.eval.attack.clone()
    } else {
        schema.attributes.keys().cloned().collect()
    };
    for a in &list {
        schema.attribute_classes(a)?;
    }
    Ok(list)
}

pub fn eval(
    cfg: &ExperimentConfig,
    layout: &Layout,
    mode: Option<CompositionMode>,
    attack: &[String],
) -> Result<(LeakageReport, Vec<String>)> {
    let recipe = cfg.recipe.name;
    let mode = mode.unwrap_or(match recipe {
        Recipe::Dam => CompositionMode::Fused,
        _ => CompositionMode::TaskOnly,
    });
    let route = route_for(recipe, mode)?;
    let data = prepare_data(cfg, layout, false)?;
    let attack = attacked(cfg, &data.schema, attack)?;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let model = load_final(layout, seed)?;
        if route == Route::Fused && model.fusion.is_none() {
            return Err(DamError::MissingCheckpoint(format!(
                "{} has no fusion component",
                layout.final_dir(seed).display()
            )));
        }
        runs.push(evaluate_run(&model, &route, &data.encoded, &attack, &cfg.attackers, seed)?);
    }
    let report = LeakageReport {
        model: recipe.to_string(),
        mode: (recipe == Recipe::Dam).then_some(mode),
        runs,
    };
    let reports = layout.reports();
    let stem = format!("leakage-{}", mode);
    let rows = std::slice::from_ref(&report);
    write_text(&reports.join(format!("{stem}.md")), &render_markdown(rows, &attack))?;
    write_text(&reports.join(format!("{stem}.csv")), &render_csv(rows, &attack))?;
    write_text(&reports.join(format!("{stem}.json")), &to_json(&report))?;
    Ok((report, attack))
}

pub fn attention_report(
    cfg: &ExperimentConfig,
    layout: &Layout,
    seed: Option<u64>,
    sample_fraction: Option<f64>,
    top_n: Option<usize>,
    plot: bool,
) -> Result<(String, Vec<PathBuf>)> {
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let data = prepare_data(cfg, layout, false)?;
    let model = load_final(layout, seed)?;
    let report = fusion_attention_report(
        &model,
        &data.encoded.test.tokens,
        Some(&data.test_texts),
        CompositionMode::Fused,
        sample_fraction.unwrap_or(cfg.attention.sample_fraction),
        top_n.unwrap_or(cfg.attention.top_n),
        RngSeed(seed).derive("attention_report"),
    )?;
    let csv = layout.attention_csv(seed);
    let md = csv.with_extension("md");
    write_text(&csv, &report.to_csv())?;
    write_text(&md, &report.to_markdown())?;
    let mut files = vec![csv.clone(), md];
    if plot {
        let svg = csv.with_extension("svg");
        plot_attention(&report.adapter_labels, &report.adapter_means(), &svg)?;
        files.push(svg);
    }
    Ok((report.to_markdown(), files))
}

/// Mean attention per adapter from a long-format attention CSV, in order of
/// first appearance.
pub fn read_attention_csv(path: &Path) -> Result<(Vec<String>, Vec<f64>)> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DamError::Data(format!("{} not found", path.display())),
        _ => DamError::io(path, e),
    })?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "example_id,adapter_id,mean_attention" => {}
        _ => {
            return Err(DamError::Parse {
                path: path.into(),
                line: 1,
                message: "expected header example_id,adapter_id,mean_attention".into(),
            })
        }
    }
    let mut labels: Vec<String> = Vec::new();
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: &str| DamError::Parse {
            path: path.into(),
            line: i + 1,
            message: message.into(),
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(bad("expected three fields"));
        }
        let v: f64 = fields[2].trim().parse().map_err(|_| bad("mean_attention is not a number"))?;
        let j = match labels.iter().position(|l| l == fields[1]) {
            Some(j) => j,
            None => {
                labels.push(fields[1].to_string());
                sums.push((0.0, 0));
                labels.len() - 1
            }
        };
        sums[j].0 += v;
        sums[j].1 += 1;
    }
    if labels.is_empty() {
        return Err(DamError::Data(format!("{} has no rows", path.display())));
    }
    Ok((labels, sums.iter().map(|(s, n)| s / *n as f64).collect()))
}

/// Bar chart of mean fusion attention per adapter.
pub fn plot_attention(labels: &[String], means: &[f64], path: &Path) -> Result<()> {
    use plotters::prelude::*;

    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| DamError::io(p, e))?;
    }
    let draw_err = |e: String| DamError::Input(format!("plotting {}: {e}", path.display()));
    let root = SVGBackend::new(path, (160 + 120 * labels.len() as u32, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Mean fusion attention", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d((0..labels.len()).into_segmented(), 0.0..1.0)
        .map_err(|e| draw_err(e.to_string()))?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .y_desc("attention")
        .x_label_formatter(&|x| match x {
            SegmentValue::CenterOf(i) => labels.get(*i).cloned().unwrap_or_default(),
            _ => String::new(),
        })
        .draw()
        .map_err(|e| draw_err(e.to_string()))?;
    chart
        .draw_series(
            Histogram::vertical(&chart)
                .style(BLUE.mix(0.6).filled())
                .margin(16)
                .data(means.iter().enumerate().map(|(i, &m)| (i, m))),
        )
        .map_err(|e| draw_err(e.to_string()))?;
    root.present().map_err(|e| draw_err(e.to_string()))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub recipe: Recipe,
    pub trainable: usize,
}

/// Trainable parameter count of every recipe for the configured encoder,
/// adapters and attributes.
pub fn params(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<ParamRow>> {
    let schema = match cfg.data.source {
        DataSource::Synthetic => Schema {
            num_task_classes: cfg.data.synthetic.num_task_classes,
            attributes: cfg
                .data
                .synthetic
                .attributes
                .iter()
                .map(|a| (a.id.clone(), a.num_classes))
                .collect(),
        },
        DataSource::Jsonl => {
            let [a, b, c] = read_splits(cfg, layout)?;
            Schema::infer(&[&a, &b, &c])
        }
    };
    let attrs = if cfg.recipe.attributes.is_empty() {
        schema.attributes.keys().cloned().collect()
    } else {
        cfg.recipe.attributes.clone()
    };
    let model = DamModel::skeleton(cfg.encoder.clone(), cfg.adapter.clone(), schema, &attrs)?;
    Recipe::ALL
        .iter()
        .map(|&r| {
            Ok(ParamRow {
                recipe: r,
                trainable: recipe_trainable_params(&model, &cfg.training, r, &attrs)?,
            })
        })
        .collect()
}

fn thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

pub fn render_params(rows: &[ParamRow]) -> String {
    let mut out = String::from("| Model | # Params |\n|---|---:|\n");
    for r in rows {
        let _ = writeln!(out, "| {} | {} |", r.recipe, thousands(r.trainable));
    }
    out
}

pub fn suite(cfg: &ExperimentConfig, layout: &Layout, recipes: &[Recipe]) -> Result<String> {
    let data = prepare_data(cfg, layout, true)?;
    let base = base_model(cfg, layout, &data)?;
    let attack = attacked(cfg, &data.schema, &[])?;
    let suite = SuiteConfig {
        recipes: if recipes.is_empty() {
            Recipe::ALL.to_vec()
        } else {
            recipes.to_vec()
        },
        attributes: cfg.recipe.attributes.clone(),
        attack: attack.clone(),
        seeds: cfg.seeds.clone(),
        training: cfg.training.clone(),
        attackers: cfg.attackers.clone(),
        inlp: cfg.eval.inlp.clone(),
    };
    let reports = evaluate_suite(&base, &suite, &data.encoded)?;
    let md = render_markdown(&reports, &attack);
    write_text(&layout.reports().join("suite.md"), &md)?;
    write_text(&layout.reports().join("suite.csv"), &render_csv(&reports, &attack))?;
    write_text(&layout.reports().join("suite.json"), &to_json(&reports))?;
    Ok(md)
}

/// Runs one parsed command line and returns what it prints on success.
pub fn run(cli: Cli) -> Result<String> {
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let layout = Layout {
        root: cfg.output_dir(cli.output_root.as_deref()),
    };
    let mut out = String::new();
    match cli.command {
        Command::GenerateData { force } => {
            let _lock = DirLock::acquire(&layout.root)?;
            for f in generate_data(&cfg, &layout, force)? {
                let _ = writeln!(out, "wrote {}", f.display());
            }
        }
        Command::Train => {
            let _lock = DirLock::acquire(&layout.root)?;
            for s in train(&cfg, &layout)? {
                for st in &s.stages {
                    let acc = st
                        .history
                        .get(st.best_epoch)
                        .and_then(|h| h.val_task_accuracy)
                        .map(|a| format!("{a:.4}"))
                        .unwrap_or_else(|| "-".into());
                    let _ = writeln!(
                        out,
                        "seed {} {}: {} epochs, kept {}, val task acc {acc}, {:.1}s",
                        s.seed, st.plan, st.epochs_run, st.best_epoch, st.wall_clock_secs
                    );
                }
                let _ = writeln!(out, "seed {} final bundle {}", s.seed, s.final_bundle.display());
            }
        }
        Command::Eval { mode, attack } => {
            let _lock = DirLock::acquire(&layout.root)?;
            let (report, attack) = eval(&cfg, &layout, mode, &attack)?;
            out.push_str(&render_markdown(std::slice::from_ref(&report), &attack));
        }
        Command::AttentionReport {
            seed,
            sample_fraction,
            top_n,
            no_plot,
        } => {
            let _lock = DirLock::acquire(&layout.root)?;
            let (md, files) = attention_report(&cfg, &layout, seed, sample_fraction, top_n, !no_plot)?;
            out.push_str(&md);
            for f in files {
                let _ = writeln!(out, "wrote {}", f.display());
            }
        }
        Command::Params => out.push_str(&render_params(&params(&cfg, &layout)?)),
        Command::Plot { input, output } => {
            let input = input.unwrap_or_else(|| layout.attention_csv(cfg.seeds[0]));
            let output = output.unwrap_or_else(|| input.with_extension("svg"));
            let (labels, means) = read_attention_csv(&input)?;
            plot_attention(&labels, &means, &output)?;
            let _ = writeln!(out, "wrote {}", output.display());
        }
        Command::Suite { recipes } => {
            let _lock = DirLock::acquire(&layout.root)?;
            out.push_str(&suite(&cfg, &layout, &recipes)?);
        }
    }
    Ok(out)
}
