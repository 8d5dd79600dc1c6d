use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Provenance};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DSDS_MAGIC: &[u8; 4] = b"DSDS";
pub const DSDS_VERSION: u32 = 1;

/// Decodes a binary PPM (P6) into a 3×H×W plane-major buffer scaled to
/// [0, 1]. Returns `(width, height, pixels)`.
pub fn decode_ppm(bytes: &[u8], origin: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bad = |msg: &str| Error::format(origin, msg);
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(bad("missing P6 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        // whitespace and comments between header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("expected a decimal header field"));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("header field out of range"))?;
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(bad("zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(bad("maxval must be in 1..=65535"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing whitespace after maxval"));
    }
    pos += 1;
    let depth = if maxval < 256 { 1 } else { 2 };
    let need = w * h * 3 * depth;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| bad(&format!("raster needs {need} bytes, found {}", bytes.len() - pos)))?;
    let scale = 1.0 / maxval as f32;
    let plane = w * h;
    let mut out = vec![0f32; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            let i = (p * 3 + c) * depth;
            let v = if depth == 1 {
                raster[i] as usize
            } else {
                ((raster[i] as usize) << 8) | raster[i + 1] as usize
            };
            if v > maxval {
                return Err(bad("sample exceeds maxval"));
            }
            out[c * plane + p] = v as f32 * scale;
        }
    }
    Ok((w, h, out))
}

/// Corner-aligned bilinear resize of a C×H×W plane-major buffer: output
/// pixel `i` samples source coordinate `i·(H−1)/(H'−1)`.
pub fn bilinear_resize(src: &[f32], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f32) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let s = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (s.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, (s - lo as f64) as f32)
    };
    let mut out = vec![0f32; c * oh * ow];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for i in 0..oh {
            let (y0, y1, fy) = coord(i, h, oh);
            for j in 0..ow {
                let (x0, x1, fx) = coord(j, w, ow);
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[ch * oh * ow + i * ow + j] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    v.sort();
    Ok(v)
}

/// Reads a directory of class subdirectories holding `.ppm` images. Classes
/// are numbered in lexicographic order of their directory names.
pub fn load_image_dir(path: &Path, input_size: usize) -> Result<Dataset> {
    if input_size == 0 {
        return Err(Error::Config("input_size must be positive".into()));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(path)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!("{} has no class directories", path.display())));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut names = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let files: Vec<PathBuf> = sorted_entries(dir)?
            .into_iter()
            .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
            .collect();
        if files.is_empty() {
            return Err(Error::Data(format!(
                "class directory {} has no .ppm images",
                dir.display()
            )));
        }
        for f in files {
            let bytes = fs::read(&f).map_err(|e| Error::io(&f, e))?;
            let (w, h, px) = decode_ppm(&bytes, &f)?;
            if (w, h) == (input_size, input_size) {
                data.extend_from_slice(&px);
            } else {
                data.extend(bilinear_resize(&px, 3, h, w, input_size, input_size));
            }
            labels.push(label);
        }
        names.push(
            dir.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
    }
    Ok(Dataset {
        images: Tensor::from_vec(vec![labels.len(), 3, input_size, input_size], data)?,
        labels,
        class_names: names,
        provenance: Provenance::Corpus {
            path: path.display().to_string(),
        },
    })
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    class_names: Vec<String>,
    provenance: Provenance,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the packed `.dsds` file plus a JSON sidecar with class names and
/// provenance.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let d = ds.images.dims();
    let mut out = Vec::with_capacity(24 + 4 * ds.len() + 4 * ds.images.len());
    out.extend_from_slice(DSDS_MAGIC);
    for v in [DSDS_VERSION, d[0] as u32, d[1] as u32, d[2] as u32, d[3] as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in &ds.labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    for &v in ds.images.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    let side = Sidecar {
        class_names: ds.class_names.clone(),
        provenance: ds.provenance.clone(),
    };
    let sp = sidecar_path(path);
    fs::write(&sp, serde_json::to_string_pretty(&side)? + "\n").map_err(|e| Error::io(&sp, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::format(path, msg);
    if bytes.len() < 24 || &bytes[..4] != DSDS_MAGIC {
        return Err(bad("missing DSDS header".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let version = u32_at(4);
    if version != DSDS_VERSION as usize {
        return Err(bad(format!("unsupported version {version}")));
    }
    let (n, c, h, w) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20));
    let elems = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| bad("dimensions overflow".into()))?;
    let need = 24 + 4 * n + 4 * elems;
    if bytes.len() != need {
        return Err(bad(format!("expected {need} bytes, found {}", bytes.len())));
    }
    let labels: Vec<usize> = (0..n).map(|i| u32_at(24 + 4 * i)).collect();
    let base = 24 + 4 * n;
    let data: Vec<f32> = bytes[base..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let sp = sidecar_path(path);
    let (class_names, provenance) = if sp.exists() {
        let text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
        let s: Sidecar = serde_json::from_str(&text).map_err(|e| Error::format(&sp, e.to_string()))?;
        (s.class_names, s.provenance)
    } else {
        let k = labels.iter().max().map_or(0, |m| m + 1);
        (
            (0..k).map(|i| format!("class_{i}")).collect(),
            Provenance::Packed {
                path: path.display().to_string(),
            },
        )
    };
    let ds = Dataset {
        images: Tensor::from_vec(vec![n, c, h, w], data)?,
        labels,
        class_names,
        provenance,
    };
    ds.validate()?;
    Ok(ds)
}

/// A `.dsds` file or a class-per-directory PPM corpus.
pub fn load_path(path: &Path, input_size: usize) -> Result<Dataset> {
    if path.is_dir() {
        load_image_dir(path, input_size)
    } else if path.exists() {
        load_dataset(path)
    } else {
        Err(Error::Data(format!("{} does not exist", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_corners() {
        let src: Vec<f32> = (0..12).map(|v| v as f32).collect();
        assert_eq!(bilinear_resize(&src, 1, 3, 4, 3, 4), src);
        let up = bilinear_resize(&[0.0, 1.0, 2.0, 3.0], 1, 2, 2, 3, 3);
        assert_eq!(up, vec![0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0]);
    }

    #[test]
    fn ppm_header_comments_and_16bit() {
        let mut b = b"P6\n# made by hand\n1 1\n65535\n".to_vec();
        b.extend_from_slice(&[0xff, 0xff, 0x80, 0x00, 0x00, 0x00]);
        let (w, h, px) = decode_ppm(&b, Path::new("x.ppm")).unwrap();
        assert_eq!((w, h), (1, 1));
        assert_eq!(px[0], 1.0);
        assert!((px[1] - 32768.0 / 65535.0).abs() < 1e-7);
        assert_eq!(px[2], 0.0);
    }
}
