//! Binary PGM images and the CSV files the CLI writes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::synthdata::{SyntheticSample, JOINT_NAMES};

/// Encodes a `[H×W]` tensor with values in `[0, 1]` as 8-bit binary PGM.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = image.require_matrix("encode_pgm")?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Decodes binary PGM (maxval ≤ 255) to values in `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::Data(format!("unsupported PGM magic {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Data(format!("bad PGM header field {s:?}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Data(format!("unsupported PGM maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let raster = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| Error::Data(format!("PGM raster shorter than {w}x{h}")))?;
    Tensor::new(vec![h, w], raster.iter().map(|&b| b as f64 / maxval as f64).collect())
}

pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_pgm(image)?)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    decode_pgm(&fs::read(path)?)
}

/// `header` then one line per row, LF endings.
pub fn csv<R: AsRef<str>>(header: &str, rows: impl IntoIterator<Item = R>) -> String {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(r.as_ref());
        s.push('\n');
    }
    s
}

/// `index,component1,component2,...`
pub fn labels_csv(samples: &[SyntheticSample]) -> String {
    let width = samples.iter().map(|s| s.labels.components().len()).max().unwrap_or(1);
    let header = std::iter::once("index".to_string())
        .chain((1..=width).map(|i| format!("component{i}")))
        .collect::<Vec<_>>()
        .join(",");
    csv(
        &header,
        samples.iter().enumerate().map(|(i, s)| {
            let mut line = i.to_string();
            for c in s.labels.components() {
                line.push(',');
                line.push_str(c);
            }
            line
        }),
    )
}

/// `index,joint,x,y`
pub fn keypoints_csv(samples: &[SyntheticSample]) -> String {
    let mut rows = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        for (name, k) in JOINT_NAMES.iter().zip(&s.keypoints) {
            rows.push(format!("{i},{name},{},{}", k.x, k.y));
        }
    }
    csv("index,joint,x,y", rows)
}

/// `epoch,loss`
pub fn loss_csv(losses: &[f64]) -> String {
    csv("epoch,loss", losses.iter().enumerate().map(|(e, l)| format!("{e},{l}")))
}

/// Writes the corpus as `sample_%05d.pgm`, `pose_%05d.pgm`, `labels.csv` and `keypoints.csv`.
pub fn write_corpus(dir: &Path, samples: &[SyntheticSample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        write_pgm(&dir.join(format!("sample_{i:05}.pgm")), &s.image)?;
        write_pgm(&dir.join(format!("pose_{i:05}.pgm")), &s.pose_image)?;
    }
    fs::write(dir.join("labels.csv"), labels_csv(samples))?;
    fs::write(dir.join("keypoints.csv"), keypoints_csv(samples))?;
    Ok(())
}

/// Formats a float table with a fixed number of decimals so reruns compare byte-for-byte.
pub fn fixed(v: f64) -> String {
    let mut s = String::new();
    let _ = write!(s, "{v:.6}");
    s
}
