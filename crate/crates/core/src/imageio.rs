//! Grayscale image files: 8-bit PNG, 32-bit float PFM, and a raw f64 dump
//! that round-trips bit-exactly (used by tests and for archival renders).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Saves a [0,1] grid as an 8-bit grayscale PNG (values clamped, rounded).
pub fn save_png(path: &Path, image: &Grid) -> Result<()> {
    let bytes: Vec<u8> = image
        .values()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(image.width() as u32, image.height() as u32, bytes)
        .expect("buffer length matches dimensions");
    img.save(path)
        .map_err(|e| Error::invalid(format!("writing {}: {e}", path.display())))
}

/// Loads an 8-bit grayscale PNG into a [0,1] grid. Non-gray inputs are
/// converted to luma first.
pub fn load_png(path: &Path) -> Result<Grid> {
    let img = image::open(path)
        .map_err(|e| Error::invalid(format!("reading {}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Grid::from_vec(
        w,
        h,
        img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect(),
    )
}

/// Saves a grid as a grayscale PFM (`Pf`, little-endian, f32). PFM stores
/// rows bottom-up.
pub fn save_pfm(path: &Path, image: &Grid) -> Result<()> {
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    write!(file, "Pf\n{} {}\n-1.0\n", image.width(), image.height()).map_err(io_err)?;
    for y in (0..image.height()).rev() {
        for x in 0..image.width() {
            file.write_all(&(image.at(x, y) as f32).to_le_bytes())
                .map_err(io_err)?;
        }
    }
    Ok(())
}

pub fn load_pfm(path: &Path) -> Result<Grid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    // Header: three newline-terminated tokens, then raw samples.
    let mut offset = 0usize;
    let mut lines = Vec::new();
    for _ in 0..3 {
        let end = bytes[offset..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or(Error::Parse {
                record: 0,
                message: "truncated PFM header".into(),
            })?;
        lines.push(String::from_utf8_lossy(&bytes[offset..offset + end]).to_string());
        offset += end + 1;
    }
    if lines[0].trim() != "Pf" {
        return Err(Error::Parse {
            record: 0,
            message: "not a grayscale PFM".into(),
        });
    }
    let dims: Vec<usize> = lines[1]
        .split_whitespace()
        .map(|s| s.parse().unwrap_or(0))
        .collect();
    if dims.len() != 2 || dims[0] == 0 || dims[1] == 0 {
        return Err(Error::Parse {
            record: 0,
            message: "bad PFM dimensions".into(),
        });
    }
    let scale: f64 = lines[2].trim().parse().unwrap_or(-1.0);
    let little_endian = scale < 0.0;
    let (w, h) = (dims[0], dims[1]);
    if bytes.len() - offset < w * h * 4 {
        return Err(Error::Parse {
            record: 0,
            message: "truncated PFM payload".into(),
        });
    }
    let mut grid = Grid::zeros(w, h);
    let mut cursor = offset;
    for y in (0..h).rev() {
        for x in 0..w {
            let raw: [u8; 4] = bytes[cursor..cursor + 4].try_into().unwrap();
            let v = if little_endian {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
            *grid.at_mut(x, y) = v as f64;
            cursor += 4;
        }
    }
    Ok(grid)
}

/// Exact f64 dump: magic, dimensions, then row-major little-endian values.
pub fn save_raw(path: &Path, image: &Grid) -> Result<()> {
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    file.write_all(b"GR64").map_err(io_err)?;
    file.write_all(&(image.width() as u32).to_le_bytes()).map_err(io_err)?;
    file.write_all(&(image.height() as u32).to_le_bytes()).map_err(io_err)?;
    for &v in image.values() {
        file.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    Ok(())
}

pub fn load_raw(path: &Path) -> Result<Grid> {
    let mut file =
        std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut header = [0u8; 12];
    file.read_exact(&mut header).map_err(|_| Error::Parse {
        record: 0,
        message: "truncated raw header".into(),
    })?;
    if &header[0..4] != b"GR64" {
        return Err(Error::Parse {
            record: 0,
            message: "bad raw magic".into(),
        });
    }
    let w = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut data = Vec::with_capacity(w * h);
    let mut buf = [0u8; 8];
    for i in 0..w * h {
        file.read_exact(&mut buf).map_err(|_| Error::Parse {
            record: i + 1,
            message: "truncated raw payload".into(),
        })?;
        data.push(f64::from_le_bytes(buf));
    }
    Grid::from_vec(w, h, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(seed: u64) -> Grid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid::from_vec(7, 5, (0..35).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn png_roundtrip_quantizes_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let g = random_grid(1);
        save_png(&path, &g).unwrap();
        let back = load_png(&path).unwrap();
        for (a, b) in g.values().iter().zip(back.values()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn pfm_roundtrip_preserves_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pfm");
        let g = random_grid(2);
        save_pfm(&path, &g).unwrap();
        let back = load_pfm(&path).unwrap();
        for (a, b) in g.values().iter().zip(back.values()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn raw_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.gr64");
        let g = random_grid(3);
        save_raw(&path, &g).unwrap();
        let back = load_raw(&path).unwrap();
        assert_eq!(g, back);
    }
}
