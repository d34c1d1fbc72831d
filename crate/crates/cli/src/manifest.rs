//! Run manifests written beside every output file.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

/// Provenance record for one command invocation.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub version: String,
    /// Seconds since the Unix epoch.
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new<C: Serialize>(
        command: &str,
        config: &C,
        seed: Option<u64>,
        started_unix: u64,
        outputs: Vec<PathBuf>,
    ) -> serde_json::Result<Self> {
        Ok(Self {
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix,
            finished_unix: unix_now(),
            outputs,
        })
    }

    /// Writes `<output>.manifest.json`.
    pub fn write_beside(&self, output: &Path) -> std::io::Result<PathBuf> {
        let path = manifest_path(output);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_sits_beside_output() {
        assert_eq!(
            manifest_path(Path::new("out/run.csv")),
            PathBuf::from("out/run.csv.manifest.json")
        );
    }

    #[test]
    fn manifest_round_trips_config() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("x.csv");
        let m = RunManifest::new(
            "cost",
            &serde_json::json!({"d": 4096}),
            Some(3),
            1,
            vec![out.clone()],
        )
        .unwrap();
        let p = m.write_beside(&out).unwrap();
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
        assert_eq!(v["command"], "cost");
        assert_eq!(v["config"]["d"], 4096);
        assert_eq!(v["seed"], 3);
        assert_eq!(v["outputs"][0], out.to_str().unwrap());
    }
}
