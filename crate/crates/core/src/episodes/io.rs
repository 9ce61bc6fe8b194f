use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Episode;
use crate::error::{Error, Result};

/// Writes one JSON object per line.
pub fn write_episodes<W: Write>(episodes: &[Episode], mut out: W) -> Result<()> {
    for ep in episodes {
        serde_json::to_writer(&mut out, ep)?;
        out.write_all(b"\n")
            .map_err(|e| Error::io("<episodes>", e))?;
    }
    out.flush().map_err(|e| Error::io("<episodes>", e))
}

/// Parses a line-delimited episode stream; `name` labels error messages.
pub fn read_episodes<R: Read>(input: R, name: &str) -> Result<Vec<Episode>> {
    let mut episodes = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line.map_err(|e| Error::io(name, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |msg: String| Error::Format {
            path: name.to_string(),
            line: i + 1,
            msg,
        };
        let ep: Episode = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        ep.validate().map_err(|e| fail(e.to_string()))?;
        episodes.push(ep);
    }
    Ok(episodes)
}

pub fn export_episodes(episodes: &[Episode], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_episodes(episodes, BufWriter::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn import_episodes(path: &Path) -> Result<Vec<Episode>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_episodes(file, &path.display().to_string())
}
