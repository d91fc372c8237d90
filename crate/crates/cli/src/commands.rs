use std::fmt::Display;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use histostain::convnet::{load_checkpoint, save_checkpoint, CANONICAL_WIDTHS};
use histostain::io::{load_png, save_png, write_atomic};
use histostain::pipeline::{
    blend_class_map, classify_tile, evaluate, generate_synthetic_dataset, group_classes, load_dataset, predict_patches,
    render_class_map, run_experiment_grid, save_dataset, train_with_log, write_probability_dump, ClassMapping, Dataset,
    GenConfig, LutNormalizer, MacenkoNormalizer, Normalizer, Palette, Texture, TrainConfig, DEFAULT_PALETTE,
};
use histostain::{
    apply_lut, bake_lut, fit_template, normalize, read_lut, write_lut, EstimationConfig, OpticsConfig, StainBasis,
    TemplateParams,
};

use crate::config::{ConfigFile, List};
use crate::{
    Cli, Command, EstimationArgs, MappingPreset, NormalizationArgs, PaletteChoice, TextureSet, TrainArgs, UsageError,
};

fn usage(err: impl Display) -> anyhow::Error {
    UsageError(err.to_string()).into()
}

/// Options shared by all subcommands after merging flags and the config file.
struct Settings {
    file: ConfigFile,
    seed: u64,
    deterministic: bool,
}

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => ConfigFile::load(path).map_err(usage)?,
        None => ConfigFile::default(),
    };
    let seed = file.resolve(cli.seed, "seed", 42).map_err(usage)?;
    let deterministic = cli.deterministic || file.get("deterministic").map_err(usage)?.unwrap_or(false);
    let threads: Option<usize> = match cli.threads {
        Some(n) => Some(n),
        None => file.get("threads").map_err(usage)?,
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let ctx = Settings {
        file,
        seed,
        deterministic,
    };

    match cli.command {
        Command::FitTemplate { input, out, estimation } => {
            let cfg = ctx.estimation(&estimation, EstimationConfig::default())?;
            let image = read_image(&input)?;
            let template = fit_template(&image, &cfg, &OpticsConfig::default())
                .with_context(|| format!("fitting a template to {}", input.display()))?;
            template
                .save(&out)
                .with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Normalize {
            input,
            template,
            out,
            estimation,
        } => {
            let template = read_template(&template)?;
            let cfg = ctx.estimation(&estimation, template.estimation)?;
            let image = read_image(&input)?;
            let normalized =
                normalize(&image, &template, &cfg).with_context(|| format!("normalizing {}", input.display()))?;
            write_image(&normalized, &out)?;
        }
        Command::BakeLut { source, template, out } => {
            let lut = bake_lut(&read_template(&source)?, &read_template(&template)?);
            write_lut(&lut, &out).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::ApplyLut { input, lut, out } => {
            let lut = read_lut(&lut).with_context(|| format!("reading {}", lut.display()))?;
            write_image(&apply_lut(&read_image(&input)?, &lut), &out)?;
        }
        Command::Train { data, out, log, train } => {
            let config = ctx.train_config(&train)?;
            let dataset = read_dataset(&data)?;
            let mut lines = String::new();
            let model = train_with_log(&dataset, &config, |entry| {
                println!("{entry}");
                lines.push_str(&format!("{entry}\n"));
            })
            .context("training")?;
            save_checkpoint(&model.spec, &model.params, &out).with_context(|| format!("writing {}", out.display()))?;
            let names = model.class_names.join("\n") + "\n";
            write_text(&class_names_path(&out), &names)?;
            if let Some(log) = log {
                write_text(&log, &lines)?;
            }
        }
        Command::Classify {
            model,
            input,
            out,
            dump,
            overlay,
            normalization,
            estimation,
        } => {
            let (spec, params) = load_checkpoint(&model).with_context(|| format!("reading {}", model.display()))?;
            let normalizer = ctx.normalizer(&normalization, &estimation)?;
            let tile = read_image(&input)?;
            let map = classify_tile(&spec, &params, &tile, normalizer.as_deref())
                .with_context(|| format!("classifying {}", input.display()))?;
            write_image(&render_class_map(&map, &DEFAULT_PALETTE)?, &out)?;
            if let Some(path) = overlay {
                write_image(&blend_class_map(&map, &DEFAULT_PALETTE, &tile)?, &path)?;
            }
            if let Some(path) = dump {
                write_probability_dump(&map, &path).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Evaluate {
            model,
            data,
            mapping,
            preset,
            out,
            normalization,
            estimation,
        } => {
            let (spec, params) = load_checkpoint(&model).with_context(|| format!("reading {}", model.display()))?;
            let normalizer = ctx.normalizer(&normalization, &estimation)?;
            let mut dataset = read_dataset(&data)?;
            if let Some(n) = &normalizer {
                dataset = dataset
                    .try_map(|img| n.normalize(img))
                    .context("normalizing the dataset")?;
            }
            let patches: Vec<_> = dataset.iter().map(|(_, p)| p.clone()).collect();
            let probs = predict_patches(&spec, &params, &patches).context("classifying patches")?;
            let labels = dataset.labels();
            let model_names = read_class_names(&model, spec.num_classes)?;

            let mapping = match (mapping, preset) {
                (Some(path), _) => {
                    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    Some(
                        ClassMapping::parse(&text, &model_names, dataset.class_names())
                            .with_context(|| format!("in {}", path.display()))?,
                    )
                }
                (None, Some(MappingPreset::RcToCrc)) => Some(
                    ClassMapping::rc_to_crc(&model_names, dataset.class_names())
                        .context("the rc-to-crc preset needs the rectal and colorectal class names")?,
                ),
                (None, None) => None,
            };
            let report = match mapping {
                Some(mapping) => {
                    let grouped = group_classes(&probs, &labels, &mapping)?;
                    let metrics = evaluate(&grouped.predictions, &grouped.labels, mapping.num_groups())?;
                    metrics.to_text(Some(&mapping.group_names()))
                }
                None => {
                    if spec.num_classes != dataset.num_classes() {
                        anyhow::bail!(
                            "model has {} classes but {} has {}; pass --mapping to group them",
                            spec.num_classes,
                            data.display(),
                            dataset.num_classes()
                        );
                    }
                    let predicted: Vec<usize> = probs.iter().map(|p| histostain::convnet::argmax(p)).collect();
                    evaluate(&predicted, &labels, spec.num_classes)?.to_text(Some(dataset.class_names()))
                }
            };
            print!("{report}");
            if let Some(out) = out {
                write_text(&out, &report)?;
            }
        }
        Command::Grid {
            train_data,
            test_data,
            template,
            out,
            train,
        } => {
            let config = ctx.train_config(&train)?;
            let template = read_template(&template)?;
            let train_set = read_dataset(&train_data)?;
            let test_set = read_dataset(&test_data)?;
            let grid = run_experiment_grid(&train_set, &test_set, &template, &config).context("running the grid")?;
            let table = grid.to_string();
            print!("{table}");
            if let Some(out) = out {
                write_text(&out, &table)?;
            }
        }
        Command::Synth {
            out,
            textures,
            classes,
            patches_per_class,
            noise_sd,
            palette,
        } => {
            let f = &ctx.file;
            let patches = f.resolve(patches_per_class, "patches_per_class", 64).map_err(usage)?;
            let mut config = match textures {
                TextureSet::Catalogue => {
                    let k = f.resolve(classes, "classes", 3).map_err(usage)?;
                    GenConfig::standard(k, patches, ctx.seed).map_err(|e| usage(format!("--classes: {e}")))?
                }
                TextureSet::StainShift => {
                    if classes.is_some() {
                        return Err(usage("--classes only applies to --textures catalogue"));
                    }
                    GenConfig {
                        textures: Texture::stain_shift_set(),
                        ..GenConfig::standard(2, patches, ctx.seed)?
                    }
                }
            };
            config.palette = match palette {
                PaletteChoice::Reference => Palette::fixed(StainBasis::reference()),
                PaletteChoice::Varied => Palette::varied(StainBasis::reference()),
                PaletteChoice::Shifted => Palette::shifted(),
            };
            config.noise_sd = f.resolve(noise_sd, "noise_sd", config.noise_sd).map_err(usage)?;
            if patches == 0 || !(config.noise_sd >= 0.0) {
                return Err(usage(
                    "--patches-per-class must be at least 1 and --noise-sd non-negative",
                ));
            }
            let dataset = generate_synthetic_dataset(&config)?;
            save_dataset(&dataset, &out).with_context(|| format!("writing {}", out.display()))?;
        }
    }
    Ok(())
}

impl Settings {
    fn estimation(&self, args: &EstimationArgs, base: EstimationConfig) -> Result<EstimationConfig> {
        let f = &self.file;
        let cfg = EstimationConfig {
            od_threshold_beta: f.resolve(args.beta, "beta", base.od_threshold_beta).map_err(usage)?,
            angle_percentile_alpha: f
                .resolve(args.alpha, "alpha", base.angle_percentile_alpha)
                .map_err(usage)?,
            concentration_percentile: f
                .resolve(args.cpct, "cpct", base.concentration_percentile)
                .map_err(usage)?,
            min_tissue_pixels: f
                .resolve(args.min_tissue_pixels, "min_tissue_pixels", base.min_tissue_pixels)
                .map_err(usage)?,
        };
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }

    fn train_config(&self, args: &TrainArgs) -> Result<TrainConfig> {
        let f = &self.file;
        let d = TrainConfig::default();
        let widths = f
            .resolve(args.widths.clone(), "widths", List(CANONICAL_WIDTHS.to_vec()))
            .map_err(usage)?;
        let widths: [usize; 6] = widths
            .0
            .try_into()
            .map_err(|_| usage("--widths takes exactly six comma-separated values"))?;
        let augment = if args.no_augment {
            false
        } else {
            f.get("augment_rotations")
                .map_err(usage)?
                .unwrap_or(d.augment_rotations)
        };
        let config = TrainConfig {
            iterations: f.resolve(args.iterations, "iterations", d.iterations).map_err(usage)?,
            batch_size: f.resolve(args.batch_size, "batch_size", d.batch_size).map_err(usage)?,
            learning_rate: f
                .resolve(args.learning_rate, "learning_rate", d.learning_rate)
                .map_err(usage)?,
            seed: self.seed,
            augment_rotations: augment,
            validation_interval: f
                .resolve(args.validation_interval, "validation_interval", d.validation_interval)
                .map_err(usage)?,
            validation_fraction: f
                .resolve(args.validation_fraction, "validation_fraction", d.validation_fraction)
                .map_err(usage)?,
            widths,
            deterministic: self.deterministic,
        };
        config.validate().map_err(usage)?;
        Ok(config)
    }

    fn normalizer(&self, args: &NormalizationArgs, estimation: &EstimationArgs) -> Result<Option<Box<dyn Normalizer>>> {
        if let Some(path) = &args.template {
            let template = read_template(path)?;
            let mut n = MacenkoNormalizer::new(template);
            n.estimation = self.estimation(estimation, template.estimation)?;
            return Ok(Some(Box::new(n)));
        }
        if let Some(path) = &args.lut {
            let lut = read_lut(path).with_context(|| format!("reading {}", path.display()))?;
            return Ok(Some(Box::new(LutNormalizer { lut })));
        }
        Ok(None)
    }
}

fn read_image(path: &Path) -> Result<histostain::RgbImage> {
    load_png(path).with_context(|| format!("reading {}", path.display()))
}

fn write_image(image: &histostain::RgbImage, path: &Path) -> Result<()> {
    save_png(image, path).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn read_template(path: &Path) -> Result<TemplateParams> {
    TemplateParams::load(path).with_context(|| format!("reading template {}", path.display()))
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn class_names_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".classes");
    PathBuf::from(s)
}

/// Class names stored next to a checkpoint, or the class indices when the
/// file is absent.
fn read_class_names(checkpoint: &Path, num_classes: usize) -> Result<Vec<String>> {
    let path = class_names_path(checkpoint);
    if !path.exists() {
        return Ok((0..num_classes).map(|c| c.to_string()).collect());
    }
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let names: Vec<String> = text
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    if names.len() != num_classes {
        anyhow::bail!(
            "{} lists {} classes, the model has {num_classes}",
            path.display(),
            names.len()
        );
    }
    Ok(names)
}
