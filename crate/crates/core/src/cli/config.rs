//! Sectioned `key = value` experiment manifests mirroring [`TrainConfig`].
//!
//! ```text
//! [network]
//! widths = 784,784,10
//! variant = icnn_projection
//! init = convex
//!
//! [training]
//! learning_rate = 1e-4
//! batch_size = 128
//! epochs = 10
//!
//! [dataset]
//! kind = synthetic
//! classes = 10
//! dim = 784
//! per_class = 100
//! separation = 3.0
//! ```
//!
//! `#` starts a comment; unknown keys and sections are rejected.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::network::{InitScheme, NetworkConfig, Variant};
use crate::training::{DatasetSpec, TrainConfig};

fn parse_sections(text: &str) -> Result<BTreeMap<String, BTreeMap<String, String>>> {
    let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    let mut current = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| Error::Format(format!("line {}: unterminated section", lineno + 1)))?;
            current = name.trim().to_string();
            sections.entry(current.clone()).or_default();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Format(format!("line {}: expected 'key = value', got '{line}'", lineno + 1))
        })?;
        if current.is_empty() {
            return Err(Error::Format(format!(
                "line {}: key outside of any [section]",
                lineno + 1
            )));
        }
        sections
            .get_mut(&current)
            .expect("section exists")
            .insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(sections)
}

struct Section<'a> {
    name: &'a str,
    entries: BTreeMap<String, String>,
}

impl Section<'_> {
    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    fn required(&mut self, key: &str) -> Result<String> {
        self.take(key)
            .ok_or_else(|| Error::Format(format!("[{}] is missing '{key}'", self.name)))
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            Some(v) => v
                .parse()
                .map_err(|e| Error::Format(format!("[{}] {key}: {e}", self.name))),
            None => Ok(default),
        }
    }

    fn parse_required<T: std::str::FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.required(key)?;
        v.parse()
            .map_err(|e| Error::Format(format!("[{}] {key}: {e}", self.name)))
    }

    fn finish(self) -> Result<()> {
        if let Some(key) = self.entries.keys().next() {
            return Err(Error::Format(format!("[{}] has unknown key '{key}'", self.name)));
        }
        Ok(())
    }
}

/// Parse a training manifest.
pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let mut sections = parse_sections(text)?;
    let known = ["network", "training", "dataset"];
    if let Some(name) = sections.keys().find(|k| !known.contains(&k.as_str())) {
        return Err(Error::Format(format!("unknown section [{name}]")));
    }

    let mut network = Section {
        name: "network",
        entries: sections.remove("network").unwrap_or_default(),
    };
    let widths_raw = network.required("widths")?;
    let layer_widths: Vec<usize> = widths_raw
        .split(',')
        .map(|w| {
            w.trim()
                .parse()
                .map_err(|e| Error::Format(format!("[network] widths: {e}")))
        })
        .collect::<Result<_>>()?;
    let alpha: f64 = network.parse("alpha", 0.0)?;
    let variant: Variant = network.parse_required("variant")?;
    let skip_connections: bool = network.parse("skip_connections", false)?;
    let init_name = network.required("init")?;
    let init_scheme = match init_name.as_str() {
        "he" => InitScheme::DefaultHe,
        "lecun" => InitScheme::Lecun,
        "convex" => InitScheme::ConvexInit {
            rho_star: network.parse("rho_star", 0.5)?,
            var_star: network.parse("var_star", 1.0)?,
            beta: network.parse("beta", 0.0)?,
        },
        other => return Err(Error::Format(format!("[network] unknown init '{other}'"))),
    };
    network.finish()?;

    let mut training = Section {
        name: "training",
        entries: sections.remove("training").unwrap_or_default(),
    };
    let learning_rate: f64 = training.parse_required("learning_rate")?;
    let l2: f64 = training.parse("l2", 0.0)?;
    let batch_size: usize = training.parse("batch_size", 128)?;
    let epochs: usize = training.parse_required("epochs")?;
    let seed: u64 = training.parse("seed", 0)?;
    training.finish()?;

    let mut dataset = Section {
        name: "dataset",
        entries: sections.remove("dataset").unwrap_or_default(),
    };
    let kind = dataset.required("kind")?;
    let limit: Option<usize> = match dataset.take("limit") {
        Some(v) => Some(
            v.parse()
                .map_err(|e| Error::Format(format!("[dataset] limit: {e}")))?,
        ),
        None => None,
    };
    let spec = match kind.as_str() {
        "synthetic" => DatasetSpec::Synthetic {
            n_classes: dataset.parse_required("classes")?,
            dim: dataset.parse_required("dim")?,
            n_per_class: dataset.parse_required("per_class")?,
            separation: dataset.parse("separation", 3.0)?,
        },
        "idx" => DatasetSpec::IdxPair {
            images: PathBuf::from(dataset.required("images")?),
            labels: PathBuf::from(dataset.required("labels")?),
        },
        other => return Err(Error::Format(format!("[dataset] unknown kind '{other}'"))),
    };
    dataset.finish()?;

    let config = TrainConfig {
        network: NetworkConfig {
            layer_widths,
            alpha,
            variant,
            skip_connections,
            init_scheme,
        },
        learning_rate,
        l2,
        batch_size,
        epochs,
        seed,
        dataset: spec,
        limit,
    };
    config.network.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = "\
# comment
[network]
widths = 6, 16, 3
variant = icnn_projection
init = convex
rho_star = 0.5

[training]
learning_rate = 1e-3
epochs = 2
batch_size = 32
seed = 5

[dataset]
kind = synthetic
classes = 3
dim = 6
per_class = 50
separation = 4.0
limit = 120
";

    #[test]
    fn parses_full_manifest() {
        let config = parse_train_config(GOOD).unwrap();
        assert_eq!(config.network.layer_widths, vec![6, 16, 3]);
        assert_eq!(config.network.variant, Variant::IcnnProjection);
        assert!(matches!(
            config.network.init_scheme,
            InitScheme::ConvexInit { rho_star, var_star, beta }
                if rho_star == 0.5 && var_star == 1.0 && beta == 0.0
        ));
        assert_eq!(config.batch_size, 32);
        assert_eq!(config.seed, 5);
        assert_eq!(config.limit, Some(120));
        assert!(matches!(config.dataset, DatasetSpec::Synthetic { n_classes: 3, .. }));
    }

    #[test]
    fn rejects_unknown_keys_and_sections() {
        let bad = GOOD.replace("rho_star", "rho_wrong");
        assert!(parse_train_config(&bad).is_err());
        let bad = format!("{GOOD}\n[extra]\nx = 1\n");
        assert!(parse_train_config(&bad).is_err());
        let bad = GOOD.replace("learning_rate = 1e-3\n", "");
        assert!(parse_train_config(&bad).is_err());
        let bad = GOOD.replace("icnn_projection", "mystery");
        assert!(parse_train_config(&bad).is_err());
    }

    #[test]
    fn idx_dataset_kind() {
        let text = "\
[network]
widths = 784,100,10
variant = nonconvex
init = he

[training]
learning_rate = 1e-4
epochs = 1

[dataset]
kind = idx
images = train-images-idx3-ubyte
labels = train-labels-idx1-ubyte
";
        let config = parse_train_config(text).unwrap();
        assert!(matches!(config.dataset, DatasetSpec::IdxPair { .. }));
        assert_eq!(config.batch_size, 128);
    }
}
