//! Settings read from a dataset's `config.txt`.
//!
//! Command-line flags override these values, which in turn override the
//! built-in defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use terrabev::bev_grid::{GridSpec, DEFAULT_LEVELS};
use terrabev::fusion_model::Hyperparams;
use terrabev::pseudo_label::PseudoLabelParams;
use terrabev::synth::DEFAULT_NUM_CLASSES;
use terrabev::{io, Error, Result};

const KNOWN_KEYS: [&str; 24] = [
    "resolution",
    "origin_x",
    "origin_y",
    "width",
    "height",
    "num_classes",
    "seed",
    "frames",
    "noise_sigma",
    "label_noise",
    "dropout",
    "beams",
    "rings",
    "alpha0",
    "window",
    "z_ceiling",
    "densify_radius",
    "densify_lambda",
    "lr",
    "epochs",
    "hidden",
    "batch_cells",
    "levels",
    "train_frames",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub grid: GridSpec,
    pub num_classes: usize,
    pub seed: u64,
    pub frames: usize,
    pub noise_sigma: f64,
    pub label_noise: f64,
    pub dropout: f64,
    pub beams: Option<usize>,
    pub rings: Option<usize>,
    pub pseudo: PseudoLabelParams,
    pub hyper: Hyperparams,
    pub levels: Vec<usize>,
    /// Frames used by `train`; all frames when absent.
    pub train_frames: Option<Vec<usize>>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            grid: GridSpec::default(),
            num_classes: DEFAULT_NUM_CLASSES,
            seed: 0,
            frames: 10,
            noise_sigma: 0.0,
            label_noise: 0.0,
            dropout: 0.0,
            beams: None,
            rings: None,
            pseudo: PseudoLabelParams::default(),
            hyper: Hyperparams::default(),
            levels: DEFAULT_LEVELS.to_vec(),
            train_frames: None,
        }
    }
}

struct Values<'a> {
    path: &'a Path,
    map: &'a BTreeMap<String, (String, usize)>,
}

impl Values<'_> {
    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        let Some((raw, line)) = self.map.get(key) else {
            return Ok(None);
        };
        raw.parse().map(Some).map_err(|_| Error::Format {
            path: self.path.to_path_buf(),
            message: format!("line {line}: invalid value `{raw}` for `{key}`"),
        })
    }

    fn list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        let Some((raw, line)) = self.map.get(key) else {
            return Ok(None);
        };
        parse_list(raw).map(Some).ok_or_else(|| Error::Format {
            path: self.path.to_path_buf(),
            message: format!("line {line}: invalid list `{raw}` for `{key}`"),
        })
    }
}

/// Comma-separated non-negative integers.
pub fn parse_list(raw: &str) -> Option<Vec<usize>> {
    raw.split(',').map(|t| t.trim().parse().ok()).collect()
}

fn join(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl Settings {
    /// Defaults overlaid with `path` when it exists.
    pub fn load(path: &Path) -> Result<Settings> {
        let mut s = Settings::default();
        if !path.is_file() {
            return Ok(s);
        }
        let map = io::read_key_values(path)?;
        for key in map.keys() {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                warn!("{}: ignoring unknown key `{key}`", path.display());
            }
        }
        let v = Values { path, map: &map };
        macro_rules! set {
            ($field:expr, $key:literal) => {
                if let Some(x) = v.get($key)? {
                    $field = x;
                }
            };
        }
        set!(s.grid.resolution, "resolution");
        set!(s.grid.origin_x, "origin_x");
        set!(s.grid.origin_y, "origin_y");
        set!(s.grid.width, "width");
        set!(s.grid.height, "height");
        set!(s.num_classes, "num_classes");
        set!(s.seed, "seed");
        set!(s.frames, "frames");
        set!(s.noise_sigma, "noise_sigma");
        set!(s.label_noise, "label_noise");
        set!(s.dropout, "dropout");
        s.beams = v.get("beams")?;
        s.rings = v.get("rings")?;
        set!(s.pseudo.alpha0, "alpha0");
        set!(s.pseudo.window, "window");
        set!(s.pseudo.z_ceiling, "z_ceiling");
        set!(s.pseudo.densify_radius, "densify_radius");
        set!(s.pseudo.densify_lambda, "densify_lambda");
        set!(s.hyper.lr, "lr");
        set!(s.hyper.epochs, "epochs");
        set!(s.hyper.hidden, "hidden");
        set!(s.hyper.batch_cells, "batch_cells");
        if let Some(l) = v.list("levels")? {
            s.levels = l;
        }
        s.train_frames = v.list("train_frames")?;
        s.hyper.seed = s.seed;
        s.grid.validate().map_err(|e| Error::Format {
            path: PathBuf::from(path),
            message: e.to_string(),
        })?;
        Ok(s)
    }

    /// Every setting as `key=value` lines, as written next to a synthetic
    /// dataset.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let g = &self.grid;
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        put("resolution", g.resolution.to_string());
        put("origin_x", g.origin_x.to_string());
        put("origin_y", g.origin_y.to_string());
        put("width", g.width.to_string());
        put("height", g.height.to_string());
        put("num_classes", self.num_classes.to_string());
        put("seed", self.seed.to_string());
        put("frames", self.frames.to_string());
        put("noise_sigma", self.noise_sigma.to_string());
        put("label_noise", self.label_noise.to_string());
        put("dropout", self.dropout.to_string());
        if let Some(b) = self.beams {
            put("beams", b.to_string());
        }
        if let Some(r) = self.rings {
            put("rings", r.to_string());
        }
        let (pl, h) = (&self.pseudo, &self.hyper);
        put("alpha0", pl.alpha0.to_string());
        put("window", pl.window.to_string());
        put("z_ceiling", pl.z_ceiling.to_string());
        put("densify_radius", pl.densify_radius.to_string());
        put("densify_lambda", pl.densify_lambda.to_string());
        put("lr", h.lr.to_string());
        put("epochs", h.epochs.to_string());
        put("hidden", h.hidden.to_string());
        put("batch_cells", h.batch_cells.to_string());
        put("levels", join(&self.levels));
        if let Some(f) = &self.train_frames {
            put("train_frames", join(f));
        }
        out
    }
}
