use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use overthink::analysis::{
    align_labeled, entropy_hallucination_correlation, generate_synthetic, parse_descriptions, parse_vocab,
    propagation_rate, scene_prior_filter, synthetic_vocab, unique_tokens_vs_propagation,
};
use overthink::config::{read_config, RunConfig};
use overthink::dataset::{build_examples, read_feature_csv, save_feature_csv, LabeledExample};
use overthink::detectors::{
    calibrate_threshold, gb_supplement_grid, grid_search, load_detector, mlp_supplement_grid, save_detector, train,
    DetectorKind,
};
use overthink::evaluation::{
    ablation_csv, ablation_text, evaluate, feature_ablation, layer_ablation, split_dataset, EvalReport, FeatureGroup,
    LayerSubset,
};
use overthink::features::TextNorm;
use overthink::logitlens::decode_sample;
use overthink::trace::{read_embedding_table, read_labels, read_trace_file, write_labels, write_trace_file, Tier, Trace};

#[derive(Parser)]
#[command(name = "overthink", version, about = "Hallucination detection from layer-wise decoder traces")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the split / grid-search seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a raw-tier trace to the decoded tier.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Top-k tokens kept per layer.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Write the feature table for the labeled samples of a trace.
    Extract {
        #[command(flatten)]
        data: TraceInput,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum)]
        text_norm: Option<TextNormArg>,
    },
    /// Train a detector on a feature table.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
        /// Hold out a stratified test split and write it here; the detector
        /// is trained on the rest.
        #[arg(long)]
        test_out: Option<PathBuf>,
        /// Pick the decision threshold by F1 on a validation split.
        #[arg(long)]
        calibrate_threshold: bool,
    },
    /// Score a detector on a feature table.
    Eval {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Overrides the threshold stored in the model.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Grid search over the supplementary GB or MLP grid.
    Gridsearch {
        #[arg(long)]
        features: PathBuf,
        #[arg(long, value_enum)]
        grid: GridArg,
        #[arg(long)]
        report: PathBuf,
        /// Retrain the best config on all rows and save it here.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Retrain with feature groups removed.
    AblateFeatures {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Comma-separated groups to omit together (s_ot, entropy, img_attn,
        /// txt_attn); repeatable. Default: each group alone.
        #[arg(long = "omit")]
        omit: Vec<String>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Retrain on layer subsets.
    AblateLayers {
        #[command(flatten)]
        data: TraceInput,
        #[arg(long)]
        report: PathBuf,
        /// Layer range `a-b` or single layer `a` (1-based); repeatable.
        #[arg(long = "subset")]
        subsets: Vec<LayerSubset>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Semantic-alignment and entropy analyses.
    Analyze {
        #[command(flatten)]
        data: TraceInput,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        output: PathBuf,
        /// Token embedding table (OEMB).
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// JSON array of token strings indexed by id.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Scene label and description embeddings; defaults to --embeddings.
        #[arg(long)]
        scene_embeddings: Option<PathBuf>,
        /// `sample_id<TAB>description` lines.
        #[arg(long)]
        descriptions: Option<PathBuf>,
        /// S_align cut (propagation) or similarity cut (scene-prior).
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Generate a synthetic raw-tier trace with labels.
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Also write the token vocabulary as JSON.
        #[arg(long)]
        vocab_out: Option<PathBuf>,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        hallucination_rate: Option<f64>,
    },
}

#[derive(Args)]
struct TraceInput {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    labels: PathBuf,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    kind: Option<DetectorKind>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Overrides the detector seed.
    #[arg(long)]
    train_seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TextNormArg {
    AllText,
    ExcludeSelf,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridArg {
    Gb,
    Mlp,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Alignment,
    Propagation,
    ScenePrior,
    Correlations,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn warn(msg: impl std::fmt::Display) {
    eprintln!("warning: {msg}");
}

fn info(msg: impl std::fmt::Display) {
    eprintln!("{msg}");
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => read_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

impl TrainFlags {
    fn apply(&self, config: &mut RunConfig) -> Result<()> {
        if let Some(kind) = self.kind {
            config.train.kind = kind;
        }
        if let Some(t) = self.threshold {
            config.train.threshold = t;
        }
        if let Some(s) = self.train_seed {
            config.train.seed = s;
        }
        config.validate()?;
        Ok(())
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Writes the effective configuration next to an output file.
fn write_provenance(output: &Path, config: &RunConfig) -> Result<()> {
    let mut name = output.as_os_str().to_owned();
    name.push(".config.toml");
    write_file(Path::new(&name), config.to_toml())
}

fn load_examples(path: &Path) -> Result<Vec<LabeledExample>> {
    let examples = read_feature_csv(path)?;
    if examples.is_empty() {
        bail!("{}: no rows", path.display());
    }
    Ok(examples)
}

fn load_labeled(data: &TraceInput, config: &RunConfig) -> Result<(Trace, Vec<LabeledExample>)> {
    let trace = read_trace_file(&data.trace)?;
    let labels = read_labels(&data.labels)?;
    let (examples, skipped) = build_examples(&trace, &labels, config.feature_options())?;
    if !skipped.is_empty() {
        warn(format!(
            "{} sample(s) without a label were skipped: {}",
            skipped.len(),
            skipped.join(", ")
        ));
    }
    Ok((trace, examples))
}

fn run(cli: Cli) -> Result<()> {
    let mut config = load_config(&cli)?;
    match cli.command {
        Command::Decode { input, output, k } => {
            if let Some(k) = k {
                config.topk = k;
            }
            config.validate()?;
            let trace = read_trace_file(&input)?;
            if trace.tier() == Tier::Decoded {
                bail!("{}: trace is already decoded", input.display());
            }
            let decoded = trace
                .samples
                .iter()
                .map(|s| decode_sample(s, &trace.head, config.topk))
                .collect::<Result<Vec<_>, _>>()?;
            let mut head = trace.head.clone();
            head.lens = None;
            write_trace_file(&head, &decoded, &output)?;
            info(format!("decoded {} samples (k = {})", decoded.len(), config.topk));
        }
        Command::Extract {
            data,
            output,
            text_norm,
        } => {
            if let Some(n) = text_norm {
                config.text_norm = match n {
                    TextNormArg::AllText => TextNorm::AllText,
                    TextNormArg::ExcludeSelf => TextNorm::ExcludeSelf,
                };
            }
            config.validate()?;
            let (_, examples) = load_labeled(&data, &config)?;
            save_feature_csv(&examples, &output)?;
            info(format!("wrote {} rows", examples.len()));
        }
        Command::Train {
            features,
            model,
            train: flags,
            test_out,
            calibrate_threshold: calibrate,
        } => {
            flags.apply(&mut config)?;
            let mut examples = load_examples(&features)?;
            if let Some(test_path) = &test_out {
                let (train_part, test_part) = split_dataset(&examples, config.test_fraction, config.seed)?;
                save_feature_csv(&test_part, test_path)?;
                examples = train_part;
            }
            let detector = if calibrate {
                let (fit_part, valid_part) = split_dataset(&examples, config.valid_fraction, config.seed)?;
                let mut d = train(&fit_part, &config.train)?;
                let scores = valid_part
                    .iter()
                    .map(|e| d.predict_features(&e.features))
                    .collect::<Result<Vec<_>, _>>()?;
                let labels: Vec<bool> = valid_part.iter().map(|e| e.label).collect();
                d.threshold = calibrate_threshold(&scores, &labels);
                config.train.threshold = d.threshold;
                d
            } else {
                train(&examples, &config.train)?
            };
            save_detector(&detector, &model)?;
            write_provenance(&model, &config)?;
            info(format!(
                "trained {} on {} rows, threshold {}",
                config.train.describe(),
                examples.len(),
                detector.threshold
            ));
        }
        Command::Eval {
            features,
            model,
            report,
            threshold,
        } => {
            let examples = load_examples(&features)?;
            let mut detector = load_detector(&model, None)?;
            if let Some(t) = threshold {
                if !(t > 0.0 && t < 1.0) {
                    bail!("threshold {t} must lie in (0,1)");
                }
                detector.threshold = t;
            }
            config.train.kind = detector.kind();
            config.train.threshold = detector.threshold;
            let r = evaluate(&detector, &examples)?;
            write_file(&report, format!("{}\n{}\n", EvalReport::csv_header(), r.csv_row()))?;
            write_provenance(&report, &config)?;
            info(r.to_text());
        }
        Command::Gridsearch {
            features,
            grid,
            report,
            model,
        } => {
            config.validate()?;
            let examples = load_examples(&features)?;
            let configs = match grid {
                GridArg::Gb => gb_supplement_grid(&config.train),
                GridArg::Mlp => mlp_supplement_grid(&config.train),
            };
            let result = grid_search(&examples, config.valid_fraction, &configs, config.seed)?;
            write_file(&report, result.to_csv())?;
            config.train = result.best.clone();
            write_provenance(&report, &config)?;
            info(format!("best: {}", result.best.describe()));
            if let Some(path) = model {
                save_detector(&train(&examples, &result.best)?, &path)?;
                write_provenance(&path, &config)?;
            }
        }
        Command::AblateFeatures {
            features,
            report,
            omit,
            train: flags,
        } => {
            flags.apply(&mut config)?;
            let examples = load_examples(&features)?;
            let mut omissions = vec![Vec::new()];
            if omit.is_empty() {
                omissions.extend(FeatureGroup::ALL.iter().map(|&g| vec![g]));
            } else {
                for set in &omit {
                    let groups = set
                        .split(',')
                        .map(|g| g.trim().parse::<FeatureGroup>().map_err(anyhow::Error::msg))
                        .collect::<Result<Vec<_>>>()?;
                    omissions.push(groups);
                }
            }
            let rows = feature_ablation(&examples, &config.train, &omissions, config.test_fraction, config.seed)?;
            write_file(&report, ablation_csv(&rows))?;
            write_provenance(&report, &config)?;
            info(ablation_text(&rows));
        }
        Command::AblateLayers {
            data,
            report,
            subsets,
            train: flags,
        } => {
            flags.apply(&mut config)?;
            let (trace, examples) = load_labeled(&data, &config)?;
            if examples.is_empty() {
                bail!("no labeled samples");
            }
            let layers = trace.head.num_layers;
            let subsets = if subsets.is_empty() {
                default_layer_subsets(layers)
            } else {
                subsets
            };
            if let Some(bad) = subsets.iter().find(|s| s.layers.iter().any(|&l| l > layers)) {
                bail!("layer subset {} exceeds the model's {layers} layers", bad.name);
            }
            let rows = layer_ablation(&examples, &config.train, &subsets, config.test_fraction, config.seed)?;
            write_file(&report, ablation_csv(&rows))?;
            write_provenance(&report, &config)?;
            info(ablation_text(&rows));
        }
        Command::Analyze {
            data,
            mode,
            output,
            embeddings,
            vocab,
            scene_embeddings,
            descriptions,
            threshold,
        } => {
            if let Some(t) = threshold {
                match mode {
                    Mode::ScenePrior => config.scene_threshold = t,
                    _ => config.propagation_threshold = t,
                }
            }
            config.validate()?;
            let csv = analyze(&config, &data, mode, embeddings, vocab, scene_embeddings, descriptions)?;
            write_file(&output, csv)?;
            write_provenance(&output, &config)?;
        }
        Command::Synth {
            output,
            labels,
            vocab_out,
            n_samples,
            hallucination_rate,
        } => {
            if let Some(n) = n_samples {
                config.synth.n_samples = n;
            }
            if let Some(r) = hallucination_rate {
                config.synth.hallucination_rate = r;
            }
            let (head, samples, labs) = generate_synthetic(&config.synth)?;
            write_trace_file(&head, &samples, &output)?;
            write_labels(&labs, &labels)?;
            if let Some(path) = vocab_out {
                let vocab = synthetic_vocab(head.vocab_size);
                write_file(&path, serde_json::to_string(&vocab)?)?;
            }
            info(format!(
                "generated {} samples ({} hallucinated)",
                samples.len(),
                config.synth.positives()
            ));
        }
    }
    Ok(())
}

/// Early, middle, late, last and all layers; for 32 layers these are
/// 1-5, 6-19, 20-32, 32 and 1-32.
fn default_layer_subsets(layers: usize) -> Vec<LayerSubset> {
    let cut = |num: usize| ((layers * num) as f64 / 32.0).round() as usize;
    let (a, b) = (cut(5).clamp(1, layers), cut(19).clamp(1, layers));
    let mut out = Vec::new();
    if layers >= 3 && a < b && b < layers {
        out.push(LayerSubset::range(1, a));
        out.push(LayerSubset::range(a + 1, b));
        out.push(LayerSubset::range(b + 1, layers));
    }
    out.push(LayerSubset::range(layers, layers));
    out.push(LayerSubset::range(1, layers));
    out
}

fn analyze(
    config: &RunConfig,
    data: &TraceInput,
    mode: Mode,
    embeddings: Option<PathBuf>,
    vocab: Option<PathBuf>,
    scene_embeddings: Option<PathBuf>,
    descriptions: Option<PathBuf>,
) -> Result<String> {
    if let Mode::Correlations = mode {
        let (_, examples) = load_labeled(data, config)?;
        let rows = entropy_hallucination_correlation(&examples)?;
        let mut out = String::from("layer,coefficient,degenerate\n");
        for r in rows {
            out.push_str(&format!("{},{},{}\n", r.layer, r.coefficient, r.degenerate));
        }
        return Ok(out);
    }

    let trace = read_trace_file(&data.trace)?;
    let labels = read_labels(&data.labels)?;
    let embeddings = embeddings.context("--embeddings is required for this mode")?;
    let table = read_embedding_table(&embeddings)?;

    if let Mode::ScenePrior = mode {
        let desc_path = descriptions.context("--descriptions is required for scene-prior")?;
        let descriptions = parse_descriptions(&read_text(&desc_path)?).map_err(anyhow::Error::msg)?;
        let scene_table = match scene_embeddings {
            Some(p) => read_embedding_table(&p)?,
            None => table.clone(),
        };
        let hallucinated = trace
            .samples
            .iter()
            .filter(|s| labels.get(&s.sample_id) == Some(true));
        let matches = scene_prior_filter(hallucinated, &descriptions, &scene_table, &table, config.scene_threshold)?;
        let mut out = String::from("sample_id,scene,similarity\n");
        for m in &matches {
            out.push_str(&format!("{},{},{}\n", csv_field(&m.sample_id), m.scene, m.similarity));
        }
        info(format!("{} sample(s) pass the scene prior", matches.len()));
        return Ok(out);
    }

    let vocab = match vocab {
        Some(p) => parse_vocab(&read_text(&p)?).map_err(anyhow::Error::msg)?,
        None => {
            warn("no --vocab given; token ids map to tok<id>");
            synthetic_vocab(trace.head.vocab_size)
        }
    };
    let aligned = align_labeled(&trace, &labels, &table, &vocab)?;
    let mut out = String::new();
    match mode {
        Mode::Alignment => {
            let layers = trace.head.num_layers;
            out.push_str("sample_id,label,unique_tokens,s_align");
            for l in 1..layers {
                out.push_str(&format!(",sim_{l}"));
            }
            out.push('\n');
            for a in &aligned {
                out.push_str(&format!(
                    "{},{},{},{}",
                    csv_field(&a.alignment.sample_id),
                    u8::from(a.label),
                    a.unique_tokens,
                    a.alignment.s_align
                ));
                for s in &a.alignment.per_layer_similarity {
                    out.push(',');
                    if let Some(s) = s {
                        out.push_str(&s.to_string());
                    }
                }
                out.push('\n');
            }
        }
        Mode::Propagation => {
            let t = config.propagation_threshold;
            let overall = propagation_rate(&aligned, t)?;
            out.push_str("unique_tokens,hallucinated,rate_pct\n");
            let total = aligned.iter().filter(|a| a.label).count();
            out.push_str(&format!("all,{total},{:.2}\n", overall * 100.0));
            for b in unique_tokens_vs_propagation(&aligned, t) {
                out.push_str(&format!("{},{},{:.2}\n", b.unique_tokens, b.hallucinated, b.rate * 100.0));
            }
            info(format!("propagation rate {:.2}% at threshold {t}", overall * 100.0));
        }
        Mode::ScenePrior | Mode::Correlations => unreachable!(),
    }
    Ok(out)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

