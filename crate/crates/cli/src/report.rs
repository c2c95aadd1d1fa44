use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crate::RunConfig;

/// One output file, fully rendered in memory.
pub(crate) struct Output {
    pub name: String,
    pub bytes: Vec<u8>,
}

impl Output {
    /// A TSV report: the invocation header, then whatever `body` writes.
    pub fn tsv(
        config: &RunConfig,
        name: impl Into<String>,
        body: impl FnOnce(&mut Vec<u8>) -> io::Result<()>,
    ) -> io::Result<Self> {
        let mut bytes = Vec::new();
        writeln!(bytes, "{}", config.header())?;
        body(&mut bytes)?;
        Ok(Self {
            name: name.into(),
            bytes,
        })
    }

    pub fn binary(name: impl Into<String>, bytes: Vec<u8>) -> Self {
        Self {
            name: name.into(),
            bytes,
        }
    }
}

/// Writes every output under a temporary name, then renames them all into
/// place. Nothing is left behind if any write fails.
pub(crate) fn commit(dir: &Path, outputs: &[Output]) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let pid = std::process::id();
    let staged: Vec<(PathBuf, PathBuf)> = outputs
        .iter()
        .map(|o| (dir.join(format!(".{}.{pid}.tmp", o.name)), dir.join(&o.name)))
        .collect();
    let cleanup = |staged: &[(PathBuf, PathBuf)]| {
        for (tmp, _) in staged {
            let _ = fs::remove_file(tmp);
        }
    };
    for (o, (tmp, _)) in outputs.iter().zip(&staged) {
        let written = fs::File::create(tmp).and_then(|mut f| {
            f.write_all(&o.bytes)?;
            f.sync_all()
        });
        if let Err(e) = written {
            cleanup(&staged);
            return Err(e);
        }
    }
    for (tmp, dest) in &staged {
        if let Err(e) = fs::rename(tmp, dest) {
            cleanup(&staged);
            return Err(e);
        }
    }
    Ok(staged.into_iter().map(|(_, dest)| dest).collect())
}
