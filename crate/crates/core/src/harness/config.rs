//! `key = value` run configuration with flag overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{filter_label, load_idx, make_toy_manifold, Dataset};
use crate::error::{Result, RvaeError};
use crate::geometry::GeodesicOptions;
use crate::model::{Mode, TrainConfig};

/// Where a resolved value came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Flag,
}

impl Source {
    fn as_str(self) -> &'static str {
        match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Flag => "flag",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    /// The synthetic two-blob manifold with this many points.
    Toy { size: usize },
    /// An IDX image/label pair, optionally restricted to one digit.
    Idx { images: PathBuf, labels: PathBuf, digit: Option<usize> },
}

impl DatasetSpec {
    /// `toy`, or `idx:<images>:<labels>`.
    fn parse(raw: &str, size: usize, digit: Option<usize>) -> Result<Self> {
        if raw == "toy" {
            return Ok(DatasetSpec::Toy { size });
        }
        if let Some(rest) = raw.strip_prefix("idx:") {
            if let Some((images, labels)) = rest.split_once(':') {
                if !images.is_empty() && !labels.is_empty() {
                    return Ok(DatasetSpec::Idx { images: images.into(), labels: labels.into(), digit });
                }
            }
        }
        Err(RvaeError::Config(format!(
            "dataset must be `toy` or `idx:<images>:<labels>`, got {raw:?}"
        )))
    }

    /// Loads the data; `data_seed` fixes the toy sample.
    pub fn load(&self, data_seed: u64) -> Result<Dataset> {
        match self {
            DatasetSpec::Toy { size } => make_toy_manifold(*size, data_seed),
            DatasetSpec::Idx { images, labels, digit } => {
                let ds = load_idx(images, labels)?;
                Ok(match digit {
                    Some(d) => filter_label(&ds, *d),
                    None => ds,
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub out_dir: PathBuf,
    /// Fraction of the data held out for evaluation.
    pub test_fraction: f64,
    pub data_seed: u64,
    /// Record elapsed time in the metrics log; off for byte-identical reruns.
    pub wall_clock: bool,
    pub train: TrainConfig,
    /// Every key with its resolved text and origin, for the metadata file.
    pub resolved: BTreeMap<String, (String, Source)>,
}

pub const KEYS: &[&str] = &[
    "dataset",
    "dataset_size",
    "digit",
    "data_seed",
    "test_fraction",
    "mode",
    "latent_dim",
    "hidden",
    "out_dir",
    "seed",
    "stage1_epochs",
    "stage2_epochs",
    "batch_size",
    "lr",
    "kl_samples",
    "eval_samples",
    "walk_steps",
    "geodesic_basis",
    "geodesic_segments",
    "geodesic_iters",
    "geodesic_lr",
    "geodesic_tol",
    "eval_geodesic_basis",
    "eval_geodesic_segments",
    "eval_geodesic_iters",
    "eval_geodesic_tol",
    "rbf_bandwidth",
    "rbf_floor",
    "max_centers",
    "rbf_warmup_steps",
    "wall_clock",
];

/// Desk-scale defaults: the 30 + 60 epoch schedule, small networks and
/// cheap warm-started geodesics inside the training loss. The RBF bandwidth
/// is matched to autoencoder codes that span a fraction of a unit.
fn defaults() -> BTreeMap<&'static str, String> {
    let t = TrainConfig::default();
    let g = GeodesicOptions::default();
    [
        ("dataset_size", "250".to_string()),
        ("digit", "all".into()),
        ("data_seed", "0".into()),
        ("test_fraction", "0.2".into()),
        ("mode", t.mode.to_string()),
        ("latent_dim", "2".into()),
        ("hidden", "32,64".into()),
        ("out_dir", "runs/default".into()),
        ("seed", t.seed.to_string()),
        ("stage1_epochs", "30".into()),
        ("stage2_epochs", "60".into()),
        ("batch_size", t.batch_size.to_string()),
        ("lr", t.lr.to_string()),
        ("kl_samples", t.kl_samples.to_string()),
        ("eval_samples", t.eval_samples.to_string()),
        ("walk_steps", t.walk_steps.to_string()),
        ("geodesic_basis", "3".into()),
        ("geodesic_segments", "8".into()),
        ("geodesic_iters", "10".into()),
        ("geodesic_lr", g.lr.to_string()),
        ("geodesic_tol", g.rel_tol.to_string()),
        ("eval_geodesic_basis", "4".into()),
        ("eval_geodesic_segments", "12".into()),
        ("eval_geodesic_iters", "100".into()),
        ("eval_geodesic_tol", g.rel_tol.to_string()),
        ("rbf_bandwidth", "100".into()),
        ("rbf_floor", t.rbf_floor.to_string()),
        ("max_centers", t.max_centers.to_string()),
        ("rbf_warmup_steps", t.rbf_warmup_steps.to_string()),
        ("wall_clock", "false".into()),
    ]
    .into_iter()
    .collect()
}

fn unknown_key(key: &str) -> RvaeError {
    RvaeError::Config(format!("unknown key {key:?}; valid keys: {}", KEYS.join(", ")))
}

/// Reads `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| RvaeError::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Merges defaults, the optional config file and the flags (flags win).
pub fn parse_config(path: Option<&Path>, flags: &[(String, String)]) -> Result<RunConfig> {
    let mut values: BTreeMap<String, (String, Source)> = defaults()
        .into_iter()
        .map(|(k, v)| (k.to_string(), (v, Source::Default)))
        .collect();
    let file_pairs = match path {
        Some(p) => parse_config_text(&fs::read_to_string(p)?)?,
        None => Vec::new(),
    };
    for (pairs, source) in [(file_pairs.as_slice(), Source::File), (flags, Source::Flag)] {
        for (k, v) in pairs {
            if !KEYS.contains(&k.as_str()) {
                return Err(unknown_key(k));
            }
            values.insert(k.clone(), (v.clone(), source));
        }
    }
    resolve(values)
}

fn get<'a>(values: &'a BTreeMap<String, (String, Source)>, key: &str) -> Result<&'a str> {
    values
        .get(key)
        .map(|(v, _)| v.as_str())
        .ok_or_else(|| RvaeError::Config(format!("missing required key {key:?}")))
}

fn num<T: std::str::FromStr>(values: &BTreeMap<String, (String, Source)>, key: &str) -> Result<T> {
    let raw = get(values, key)?;
    raw.parse()
        .map_err(|_| RvaeError::Config(format!("key {key:?}: cannot parse {raw:?}")))
}

fn resolve(values: BTreeMap<String, (String, Source)>) -> Result<RunConfig> {
    let digit = match get(&values, "digit")? {
        "all" => None,
        _ => Some(num::<usize>(&values, "digit")?),
    };
    let dataset = DatasetSpec::parse(get(&values, "dataset")?, num(&values, "dataset_size")?, digit)?;
    let latent_dim: usize = num(&values, "latent_dim")?;
    if ![2, 5, 10].contains(&latent_dim) {
        return Err(RvaeError::Config(format!("latent_dim must be 2, 5 or 10, got {latent_dim}")));
    }
    let hidden = get(&values, "hidden")?
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .ok()
                .filter(|&h| h > 0)
                .ok_or_else(|| RvaeError::Config(format!("hidden: bad width {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let test_fraction: f64 = num(&values, "test_fraction")?;
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(RvaeError::Config(format!("test_fraction must lie in [0, 1), got {test_fraction}")));
    }
    let wall_clock = match get(&values, "wall_clock")? {
        "true" => true,
        "false" => false,
        other => return Err(RvaeError::Config(format!("wall_clock must be true or false, got {other:?}"))),
    };
    let train = TrainConfig {
        mode: get(&values, "mode")?.parse::<Mode>()?,
        stage1_epochs: num(&values, "stage1_epochs")?,
        stage2_epochs: num(&values, "stage2_epochs")?,
        batch_size: num(&values, "batch_size")?,
        lr: num(&values, "lr")?,
        kl_samples: num(&values, "kl_samples")?,
        eval_samples: num(&values, "eval_samples")?,
        walk_steps: num(&values, "walk_steps")?,
        seed: num(&values, "seed")?,
        geodesic: GeodesicOptions {
            n_basis: num(&values, "geodesic_basis")?,
            n_segments: num(&values, "geodesic_segments")?,
            max_iters: num(&values, "geodesic_iters")?,
            lr: num(&values, "geodesic_lr")?,
            rel_tol: num(&values, "geodesic_tol")?,
            ..GeodesicOptions::default()
        },
        eval_geodesic: GeodesicOptions {
            n_basis: num(&values, "eval_geodesic_basis")?,
            n_segments: num(&values, "eval_geodesic_segments")?,
            max_iters: num(&values, "eval_geodesic_iters")?,
            rel_tol: num(&values, "eval_geodesic_tol")?,
            ..GeodesicOptions::default()
        },
        rbf_bandwidth: num(&values, "rbf_bandwidth")?,
        rbf_floor: num(&values, "rbf_floor")?,
        max_centers: num(&values, "max_centers")?,
        rbf_warmup_steps: num(&values, "rbf_warmup_steps")?,
    };
    train.validate()?;
    Ok(RunConfig {
        dataset,
        latent_dim,
        hidden,
        out_dir: get(&values, "out_dir")?.into(),
        test_fraction,
        data_seed: num(&values, "data_seed")?,
        wall_clock,
        train,
        resolved: values,
    })
}

impl RunConfig {
    /// `(train, test)` split of the configured data.
    pub fn load_split(&self) -> Result<(Dataset, Dataset)> {
        let data = self.dataset.load(self.data_seed)?;
        if data.is_empty() {
            return Err(RvaeError::Config("dataset is empty".into()));
        }
        if self.test_fraction == 0.0 {
            return Ok((data.clone(), data.subset(&[])));
        }
        Ok(data.split(1.0 - self.test_fraction, self.data_seed))
    }

    /// The resolved configuration as `key = value  # origin` lines; this
    /// text parses back to the same configuration.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, (v, src)) in &self.resolved {
            let _ = writeln!(out, "{k} = {v}  # {}", src.as_str());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn flags_alone_make_a_valid_config() {
        let cfg = parse_config(None, &flags(&[("dataset", "toy"), ("mode", "riemannian"), ("latent_dim", "2"), ("seed", "7")]))
            .unwrap();
        assert_eq!(cfg.dataset, DatasetSpec::Toy { size: 250 });
        assert_eq!(cfg.train.seed, 7);
        assert_eq!((cfg.train.stage1_epochs, cfg.train.stage2_epochs), (30, 60));
        assert_eq!(cfg.hidden, vec![32, 64]);
        assert!(!cfg.wall_clock);
    }

    #[test]
    fn flag_beats_file_and_origin_is_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# comment\ndataset = toy\nseed = 3\nlr = 0.01  # trailing\n").unwrap();
        let cfg = parse_config(Some(&path), &flags(&[("seed", "9")])).unwrap();
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.resolved["seed"].1, Source::Flag);
        assert_eq!(cfg.resolved["lr"].1, Source::File);
        assert!(cfg.render().contains("seed = 9  # flag"));
    }

    #[test]
    fn rendered_config_parses_back() {
        let cfg = parse_config(None, &flags(&[("dataset", "idx:a.idx:b.idx"), ("digit", "1"), ("latent_dim", "5")])).unwrap();
        let pairs = parse_config_text(&cfg.render()).unwrap();
        let back = parse_config(None, &pairs).unwrap();
        assert_eq!(back.dataset, cfg.dataset);
        assert_eq!(back.train, cfg.train);
        assert_eq!(
            back.dataset,
            DatasetSpec::Idx { images: "a.idx".into(), labels: "b.idx".into(), digit: Some(1) }
        );
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = parse_config(None, &flags(&[("dataset", "toy"), ("learning_rate", "1")])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learning_rate") && msg.contains("stage2_epochs"), "{msg}");
    }

    #[test]
    fn missing_dataset_is_named() {
        let err = parse_config(None, &[]).unwrap_err();
        assert!(err.to_string().contains("dataset"), "{err}");
    }

    #[test]
    fn rejects_bad_values() {
        for (k, v) in [("latent_dim", "3"), ("mode", "hyperbolic"), ("lr", "-1"), ("hidden", "10,0"), ("wall_clock", "yes")] {
            assert!(parse_config(None, &flags(&[("dataset", "toy"), (k, v)])).is_err(), "{k} = {v}");
        }
        assert!(parse_config(None, &flags(&[("dataset", "mnist")])).is_err());
        assert!(parse_config_text("no equals sign").is_err());
    }
}
