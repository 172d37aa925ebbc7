//! Flat key-value run configuration with section prefixes.
//!
//! Syntax: one `section.key = value` per line, `#` comments, UTF-8. Unknown
//! keys are rejected so typos cannot silently fall back to defaults. Every
//! key and its default is documented in the shipped `configs/example.cfg`.
//! Relative paths are resolved against the config file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lenspatch::error::{Error, Result};
use lenspatch::losses::LossWeights;

#[derive(Debug, Clone)]
pub struct RunConfig {
    // gen.*
    pub gen_scenes: usize,
    pub gen_test_scenes: usize,
    pub gen_width: usize,
    pub gen_height: usize,
    pub gen_seed: u64,
    pub gen_dir: PathBuf,
    pub gen_source: String,

    // data.*
    pub data_manifests: Vec<PathBuf>,

    // split.*
    pub split_train_frac: f64,
    pub split_val_frac: f64,
    pub split_test_sources: Vec<String>,
    pub split_seed: u64,

    // detector.*
    pub detector_checkpoint: PathBuf,
    pub detector_epochs: usize,
    pub detector_batch_size: usize,
    pub detector_lr: f64,
    pub detector_seed: u64,
    pub detector_ap_floor: f64,
    pub detector_lambda_box: f64,
    pub detector_lambda_noobj: f64,

    // manual.*
    pub manual_alpha_max: f64,
    pub manual_s: f64,
    pub manual_beta: f64,
    pub manual_r_min: f64,
    pub manual_r_max: f64,
    pub manual_n_shapes: usize,

    // optimizer.*
    pub opt_lr_main: f64,
    pub opt_lr_radius: f64,
    pub opt_epochs: usize,
    pub opt_batch_size: usize,
    pub opt_seed: u64,
    pub opt_weights: [f64; 4],
    pub opt_conf_threshold: f64,
    pub opt_relevance_floor: f64,
    pub opt_untargeted_floor: f64,

    // eval.*
    pub eval_target_class: String,
    pub eval_conf_threshold: f64,
    pub eval_match_iou: f64,
    pub eval_nms_iou: f64,
    pub eval_conditions: Vec<String>,
    pub eval_random_seed: u64,

    // grid.*
    pub grid_tuples: Vec<[f64; 4]>,
    pub grid_epoch_fraction: f64,

    // sweep.*
    pub sweep_axis: String,
    pub sweep_values: Vec<f64>,
    pub sweep_epoch_fraction: f64,

    // nps.*
    pub nps_colors: Option<PathBuf>,

    // out.*
    pub out_dir: PathBuf,

    // export.*
    pub export_dpi: f64,
    pub export_width_in: f64,
    pub export_height_in: f64,
}

struct KeyMap {
    path: PathBuf,
    map: BTreeMap<String, String>,
}

impl KeyMap {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn str_or(&mut self, key: &str, default: &str) -> String {
        self.take(key).unwrap_or_else(|| default.to_string())
    }

    fn parse_or<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.take(key) {
            None => Ok(default),
            Some(raw) => raw.parse::<T>().map_err(|_| Error::Invalid(format!(
                "config key `{key}`: cannot parse `{raw}`"
            ))),
        }
    }

    fn list_or(&mut self, key: &str, default: &[&str]) -> Vec<String> {
        match self.take(key) {
            None => default.iter().map(|s| s.to_string()).collect(),
            Some(raw) => raw
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect(),
        }
    }

    fn f64_list_or(&mut self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.take(key) {
            None => Ok(default.to_vec()),
            Some(raw) => raw
                .split(',')
                .map(|s| {
                    s.trim().parse::<f64>().map_err(|_| {
                        Error::Invalid(format!("config key `{key}`: cannot parse `{s}`"))
                    })
                })
                .collect(),
        }
    }

    fn finish(self) -> Result<()> {
        if let Some(key) = self.map.into_keys().next() {
            return Err(Error::UnknownConfigKey {
                key,
                path: self.path,
            });
        }
        Ok(())
    }
}

fn parse_key_values(path: &Path) -> Result<KeyMap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: format!("expected `key = value`, got `{trimmed}`"),
        })?;
        let key = key.trim().to_string();
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("duplicate key `{key}`"),
            });
        }
    }
    Ok(KeyMap {
        path: path.to_path_buf(),
        map,
    })
}

fn parse_weight_tuples(raw: &str) -> Result<Vec<[f64; 4]>> {
    raw.split(';')
        .filter(|t| !t.trim().is_empty())
        .map(|tuple| {
            let vals: Vec<f64> = tuple
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Invalid(format!("bad weight value `{v}`")))
                })
                .collect::<Result<_>>()?;
            if vals.len() != 4 {
                return Err(Error::Invalid(format!(
                    "weight tuple `{tuple}` must have 4 entries"
                )));
            }
            Ok([vals[0], vals[1], vals[2], vals[3]])
        })
        .collect()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut kv = parse_key_values(path)?;
        let config_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let resolve = |p: String, dir: &Path| -> PathBuf {
            let pb = PathBuf::from(p);
            if pb.is_absolute() {
                pb
            } else {
                dir.join(pb)
            }
        };

        let cfg = RunConfig {
            gen_scenes: kv.parse_or("gen.scenes", 500usize)?,
            gen_test_scenes: kv.parse_or("gen.test_scenes", 160usize)?,
            gen_width: kv.parse_or("gen.width", 64usize)?,
            gen_height: kv.parse_or("gen.height", 64usize)?,
            gen_seed: kv.parse_or("gen.seed", 11u64)?,
            gen_dir: resolve(kv.str_or("gen.dir", "data"), &config_dir),
            gen_source: kv.str_or("gen.source", "synth"),

            data_manifests: kv
                .list_or("data.manifests", &["data/synth.manifest", "data/synthtest.manifest"])
                .into_iter()
                .map(|p| resolve(p, &config_dir))
                .collect(),

            split_train_frac: kv.parse_or("split.train_frac", 0.9f64)?,
            split_val_frac: kv.parse_or("split.val_frac", 0.1f64)?,
            split_test_sources: kv.list_or("split.test_sources", &["synthtest"]),
            split_seed: kv.parse_or("split.seed", 3u64)?,

            detector_checkpoint: resolve(
                kv.str_or("detector.checkpoint", "out/detector.ckpt"),
                &config_dir,
            ),
            detector_epochs: kv.parse_or("detector.epochs", 25usize)?,
            detector_batch_size: kv.parse_or("detector.batch_size", 16usize)?,
            detector_lr: kv.parse_or("detector.lr", 1e-3f64)?,
            detector_seed: kv.parse_or("detector.seed", 5u64)?,
            detector_ap_floor: kv.parse_or("detector.ap_floor", 0.9f64)?,
            detector_lambda_box: kv.parse_or("detector.lambda_box", 2.0f64)?,
            detector_lambda_noobj: kv.parse_or("detector.lambda_noobj", 0.3f64)?,

            manual_alpha_max: kv.parse_or("manual.alpha_max", 0.4f64)?,
            manual_s: kv.parse_or("manual.s", 0.9f64)?,
            manual_beta: kv.parse_or("manual.beta", 2.5f64)?,
            manual_r_min: kv.parse_or("manual.r_min", 0.03f64)?,
            manual_r_max: kv.parse_or("manual.r_max", 0.25f64)?,
            manual_n_shapes: kv.parse_or("manual.n_shapes", 8usize)?,

            opt_lr_main: kv.parse_or("optimizer.lr_main", 5e-3f64)?,
            opt_lr_radius: kv.parse_or("optimizer.lr_radius", 8e-4f64)?,
            opt_epochs: kv.parse_or("optimizer.epochs", 30usize)?,
            opt_batch_size: kv.parse_or("optimizer.batch_size", 16usize)?,
            opt_seed: kv.parse_or("optimizer.seed", 7u64)?,
            opt_weights: {
                let v = kv.f64_list_or("optimizer.weights", &[0.74, 0.15, 0.1, 0.01])?;
                if v.len() != 4 {
                    return Err(Error::Invalid(
                        "optimizer.weights needs exactly 4 values".into(),
                    ));
                }
                [v[0], v[1], v[2], v[3]]
            },
            opt_conf_threshold: kv.parse_or("optimizer.conf_threshold", 0.4f64)?,
            opt_relevance_floor: kv.parse_or("optimizer.relevance_floor", 0.1f64)?,
            opt_untargeted_floor: kv.parse_or("optimizer.untargeted_floor", 0.8f64)?,

            eval_target_class: kv.str_or("eval.target_class", "octagon"),
            eval_conf_threshold: kv.parse_or("eval.conf_threshold", 0.4f64)?,
            eval_match_iou: kv.parse_or("eval.match_iou", 0.5f64)?,
            eval_nms_iou: kv.parse_or("eval.nms_iou", 0.5f64)?,
            eval_conditions: kv.list_or(
                "eval.conditions",
                &["CLEAN", "PATCH", "RANDOM", "RED", "CYAN"],
            ),
            eval_random_seed: kv.parse_or("eval.random_seed", 99u64)?,

            grid_tuples: match kv.take("grid.tuples") {
                None => lenspatch::optimizer::default_weight_grid(),
                Some(raw) => parse_weight_tuples(&raw)?,
            },
            grid_epoch_fraction: kv.parse_or("grid.epoch_fraction", 0.2f64)?,

            sweep_axis: kv.str_or("sweep.axis", "n_shapes"),
            sweep_values: kv.f64_list_or("sweep.values", &[3.0, 8.0])?,
            sweep_epoch_fraction: kv.parse_or("sweep.epoch_fraction", 0.4f64)?,

            nps_colors: kv.take("nps.colors").map(|p| resolve(p, &config_dir)),

            out_dir: resolve(kv.str_or("out.dir", "out"), &config_dir),

            export_dpi: kv.parse_or("export.dpi", 300.0f64)?,
            export_width_in: kv.parse_or("export.width_in", 0.6f64)?,
            export_height_in: kv.parse_or("export.height_in", 0.33f64)?,
        };
        kv.finish()?;
        Ok(cfg)
    }

    pub fn manual_params(&self) -> lenspatch::patch::ManualParams {
        lenspatch::patch::ManualParams {
            alpha_max: self.manual_alpha_max,
            s: self.manual_s,
            beta: self.manual_beta,
            r_min: self.manual_r_min,
            r_max: self.manual_r_max,
            n_shapes: self.manual_n_shapes,
        }
    }

    pub fn optimizer_config(&self) -> Result<lenspatch::optimizer::OptimizerConfig> {
        Ok(lenspatch::optimizer::OptimizerConfig {
            lr_main: self.opt_lr_main,
            lr_radius: self.opt_lr_radius,
            epochs: self.opt_epochs,
            batch_size: self.opt_batch_size,
            seed: self.opt_seed,
            weights: LossWeights::new(
                self.opt_weights[0],
                self.opt_weights[1],
                self.opt_weights[2],
                self.opt_weights[3],
            )?,
            conf_threshold: self.opt_conf_threshold,
            relevance_floor: self.opt_relevance_floor,
            untargeted_floor: self.opt_untargeted_floor,
        })
    }

    pub fn split_spec(&self) -> lenspatch::data::SplitSpec {
        lenspatch::data::SplitSpec {
            train_frac: self.split_train_frac,
            val_frac: self.split_val_frac,
            test_sources: self.split_test_sources.iter().cloned().collect(),
            seed: self.split_seed,
        }
    }
}
