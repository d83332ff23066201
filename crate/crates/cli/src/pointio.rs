//! Point-cloud files.
//!
//! Text form: one `x y z` triple per line, whitespace separated; blank
//! lines and lines starting with `#` are skipped. Binary form: magic
//! `FBPC`, a little-endian `u32` point count, then `count` little-endian
//! `f32` triples. Files are told apart by the magic.
//!
//! A dataset directory holds `train/<class>/` and `test/<class>/`; class
//! indices follow the sorted class directory names of `train/`.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use fbpt_core::binmodules::PointCloud;
use fbpt_core::train::Dataset;
use fbpt_core::Tensor;

pub const MAGIC: &[u8; 4] = b"FBPC";

pub fn parse_text(text: &str) -> Result<Tensor> {
    let mut data = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() != 3 {
            bail!("line {}: expected 3 coordinates, found {}", i + 1, vals.len());
        }
        for v in vals {
            let x: f64 = v.parse().with_context(|| format!("line {}: `{v}` is not a number", i + 1))?;
            if !x.is_finite() {
                bail!("line {}: non-finite coordinate `{v}`", i + 1);
            }
            data.push(x);
        }
    }
    Ok(Tensor::new(data.len() / 3, 3, data))
}

pub fn to_text(points: &Tensor) -> String {
    points.iter_rows().map(|p| format!("{} {} {}\n", p[0], p[1], p[2])).collect()
}

pub fn parse_binary(buf: &[u8]) -> Result<Tensor> {
    if buf.len() < 8 || &buf[..4] != MAGIC {
        bail!("not an FBPC file");
    }
    let n = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes")) as usize;
    let body = &buf[8..];
    if body.len() != n * 12 {
        bail!("header says {n} points ({} bytes), body has {} bytes", n * 12, body.len());
    }
    let data: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        bail!("non-finite coordinate at point {}", i / 3);
    }
    Ok(Tensor::new(n, 3, data))
}

pub fn to_binary(points: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + points.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(points.rows() as u32).to_le_bytes());
    for v in points.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn read_points(path: &Path) -> Result<Tensor> {
    let buf = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let t = if buf.starts_with(MAGIC) {
        parse_binary(&buf)
    } else {
        let text = std::str::from_utf8(&buf).map_err(|_| anyhow!("neither FBPC nor utf-8 text"))?;
        parse_text(text)
    };
    t.with_context(|| path.display().to_string())
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    v.sort();
    Ok(v)
}

/// Load `root/<split>/<class>/*` with class indices from `classes`.
fn load_split(root: &Path, split: &str, classes: &[String], num_points: usize) -> Result<Dataset> {
    let mut clouds = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        let dir = root.join(split).join(class);
        if !dir.is_dir() {
            continue;
        }
        for f in sorted_entries(&dir)?.into_iter().filter(|p| p.is_file()) {
            let pts = read_points(&f)?;
            if pts.rows() != num_points {
                bail!("{}: {} points, the model expects {num_points}", f.display(), pts.rows());
            }
            clouds.push(PointCloud::new(pts, Some(label))?);
        }
    }
    if clouds.is_empty() {
        bail!("no point clouds under {}", root.join(split).display());
    }
    Ok(Dataset {
        clouds,
        classes: classes.len(),
    })
}

/// `(train, test)` datasets from a dataset directory.
pub fn load_dataset_dir(root: &Path, num_points: usize) -> Result<(Dataset, Dataset)> {
    let classes: Vec<String> = sorted_entries(&root.join("train"))?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    Ok((
        load_split(root, "train", &classes, num_points)?,
        load_split(root, "test", &classes, num_points)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_and_errors() {
        let t = parse_text("# cloud\n0 1 2\n\n-0.5 1e-3 4\n").unwrap();
        assert_eq!(t.shape(), (2, 3));
        assert_eq!(parse_text(&to_text(&t)).unwrap(), t);
        assert!(parse_text("1 2\n").unwrap_err().to_string().contains("line 1"));
        assert!(parse_text("1 2 x\n").is_err());
        assert!(parse_text("1 2 nan\n").is_err());
    }

    #[test]
    fn binary_round_trip_and_errors() {
        let t = Tensor::new(2, 3, vec![0.5, -1.0, 2.0, 0.25, 0.0, 8.0]);
        let b = to_binary(&t);
        assert_eq!(parse_binary(&b).unwrap(), t);
        assert!(parse_binary(&b[..b.len() - 1]).is_err());
        assert!(parse_binary(b"FBPC").is_err());
    }
}
