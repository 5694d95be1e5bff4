use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::DynamicImage;

use super::{CaseDataError, Grid};

fn image_err(path: &Path, e: impl ToString) -> CaseDataError {
    CaseDataError::Image {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

/// Reads an 8- or 16-bit grayscale image (binary PGM or PNG) scaled to [0,1].
pub fn read_gray(path: &Path) -> Result<Grid, CaseDataError> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(buf) => buf
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect(),
        other => {
            return Err(image_err(
                path,
                format!("expected 8/16-bit grayscale, found {:?}", other.color()),
            ))
        }
    };
    Ok(Grid::new(h, w, data))
}

fn write_pgm(path: &Path, grid: &Grid, maxval: u16) -> Result<(), CaseDataError> {
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{} {}\n{}\n", grid.width(), grid.height(), maxval)?;
    let mut bytes = Vec::with_capacity(grid.data().len() * 2);
    for v in grid.data() {
        let q = (v.clamp(0.0, 1.0) * maxval as f64).round() as u16;
        if maxval > 255 {
            bytes.extend_from_slice(&q.to_be_bytes());
        } else {
            bytes.push(q as u8);
        }
    }
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

/// Writes a 16-bit binary PGM; values are clamped to [0,1] and quantized
/// to `round(v * 65535)`.
pub fn write_gray16(path: &Path, grid: &Grid) -> Result<(), CaseDataError> {
    write_pgm(path, grid, u16::MAX)
}

/// Writes an 8-bit binary PGM of `round(v * 255)`.
pub fn write_gray8(path: &Path, grid: &Grid) -> Result<(), CaseDataError> {
    write_pgm(path, grid, 255)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixteen_bit_round_trip_is_exact_on_the_quantization_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let g = Grid::from_fn(5, 3, |y, x| ((y * 3 + x) * 4001 % 65536) as f64 / 65535.0);
        write_gray16(&path, &g).unwrap();
        let back = read_gray(&path).unwrap();
        assert_eq!(back, g);
        assert!(std::fs::read(&path).unwrap().starts_with(b"P5"));
    }

    #[test]
    fn eight_bit_read_scales_by_255() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.pgm");
        let g = Grid::new(1, 3, vec![0.0, 128.0 / 255.0, 1.0]);
        write_gray8(&path, &g).unwrap();
        assert_eq!(read_gray(&path).unwrap(), g);
    }
}
