//! Dataset directory layout:
//!
//! ```text
//! images/<stem>.png   RGB image
//! masks/<stem>.png    binary foreground mask (nonzero = foreground)
//! classes.txt         one "<stem> <class>" line per sample
//! ```

use std::path::{Path, PathBuf};

use priorseg::image::{RgbImage, Sample};
use priorseg::io::{encode_mask_png, encode_rgb_png, read_mask_png, read_rgb_png, write_atomic};

use crate::error::{CliError, CliResult};

pub fn stem(i: usize) -> String {
    format!("{i:05}")
}

/// Encodes every file first, then writes them.
pub fn write(dir: &Path, samples: &[Sample]) -> CliResult<()> {
    let mut files: Vec<(PathBuf, Vec<u8>)> = Vec::with_capacity(2 * samples.len() + 1);
    let mut index = String::new();
    for (i, s) in samples.iter().enumerate() {
        let name = stem(i);
        files.push((dir.join("images").join(format!("{name}.png")), encode_rgb_png(&s.image)));
        files.push((dir.join("masks").join(format!("{name}.png")), encode_mask_png(&s.mask)));
        index.push_str(&format!("{name} {}\n", s.class));
    }
    files.push((dir.join("classes.txt"), index.into_bytes()));
    for (path, bytes) in files {
        write_atomic(&path, &bytes)?;
    }
    Ok(())
}

fn read_index(dir: &Path) -> CliResult<Vec<(String, usize)>> {
    let path = dir.join("classes.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let mut parts = line.split_whitespace();
            let parsed = match (parts.next(), parts.next().map(str::parse::<usize>), parts.next()) {
                (Some(s), Some(Ok(c)), None) => Some((s.to_string(), c)),
                _ => None,
            };
            parsed.ok_or_else(|| CliError::Data(format!("{}:{}: expected `<stem> <class>`", path.display(), n + 1)))
        })
        .collect()
}

/// Labelled samples in index order.
pub fn read_labelled(dir: &Path) -> CliResult<Vec<Sample>> {
    read_index(dir)?
        .into_iter()
        .map(|(name, class)| {
            let image = read_rgb_png(&dir.join("images").join(format!("{name}.png")))?;
            let mask = read_mask_png(&dir.join("masks").join(format!("{name}.png")))?;
            if (mask.width(), mask.height()) != (image.width(), image.height()) {
                return Err(CliError::Data(format!("mask of {name} does not match its image size")));
            }
            Ok(Sample { image, mask, class })
        })
        .collect()
}

/// Images listed in the index (masks are not needed).
pub fn read_images(dir: &Path) -> CliResult<Vec<RgbImage>> {
    read_index(dir)?
        .into_iter()
        .map(|(name, _)| Ok(read_rgb_png(&dir.join("images").join(format!("{name}.png")))?))
        .collect()
}

/// PNG files named on the command line; directories contribute their
/// `*.png` entries in name order.
pub fn expand_inputs(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(input)
                .map_err(|e| CliError::Data(format!("{}: {e}", input.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            entries.sort();
            out.extend(entries);
        } else {
            out.push(input.clone());
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage("no input images".into()));
    }
    Ok(out)
}
