//! Boundary to an external vocoder analyzer.
//!
//! The analyzer is any executable invoked as
//! `program [args...] <audio_path> <output_path>`. It must exit with status 0
//! and leave a feature file (see [`super::encode`]) at `output_path`.
//! Anything else is reported as [`Error::Adapter`], with the analyzer's
//! stderr attached when it fails.

use std::path::{Path, PathBuf};
use std::process::Command;

use super::{read_features, FeatureSequence};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnalyzerAdapter {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl AnalyzerAdapter {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        Self { program: program.into(), args: Vec::new() }
    }

    pub fn arg(mut self, a: impl Into<String>) -> Self {
        self.args.push(a.into());
        self
    }

    /// Runs the analyzer on one audio file and reads back its output.
    pub fn analyze<T: Scalar>(&self, audio: &Path, output: &Path) -> Result<FeatureSequence<T>> {
        if !audio.exists() {
            return Err(Error::Adapter(format!("audio file {} does not exist", audio.display())));
        }
        let out = Command::new(&self.program)
            .args(&self.args)
            .arg(audio)
            .arg(output)
            .output()
            .map_err(|e| Error::Adapter(format!("cannot start {}: {e}", self.program.display())))?;
        if !out.status.success() {
            return Err(Error::Adapter(format!(
                "{} exited with {}: {}",
                self.program.display(),
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        if !output.exists() {
            return Err(Error::Adapter(format!("analyzer produced no file at {}", output.display())));
        }
        read_features(output).map_err(|e| Error::Adapter(format!("analyzer output rejected: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake() -> AnalyzerAdapter {
        let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/fake_analyzer.py");
        AnalyzerAdapter::new("python3").arg(script.to_string_lossy())
    }

    #[test]
    fn fake_analyzer_output_is_read() {
        let dir = tempfile::tempdir().unwrap();
        let audio = dir.path().join("a.wav");
        std::fs::write(&audio, vec![0u8; 3200]).unwrap();
        let seq: FeatureSequence<f32> = fake().analyze(&audio, &dir.path().join("a.dgvc")).unwrap();
        assert_eq!(seq.order(), 35);
        assert_eq!(seq.frames(), 20);
        assert_eq!(seq.sample_rate(), 16000);
    }

    #[test]
    fn failures_are_adapter_errors() {
        let dir = tempfile::tempdir().unwrap();
        let audio = dir.path().join("empty.wav");
        std::fs::write(&audio, b"").unwrap();
        let r = fake().analyze::<f32>(&audio, &dir.path().join("x.dgvc"));
        assert!(matches!(r, Err(Error::Adapter(_))), "{r:?}");
        let missing = AnalyzerAdapter::new(dir.path().join("no-such-analyzer"));
        assert!(matches!(missing.analyze::<f32>(&audio, &dir.path().join("y.dgvc")), Err(Error::Adapter(_))));
    }
}
