//! Raster masks: binary PGM (P5, 0 = OUT, 255 = IN) in 2D with the top row
//! at the largest y, newline-separated 0/1 text in 1D and 3D.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{CellSet, GridGeometry, Label, PhaseField};

pub fn write_pgm(set: &CellSet, out: &mut impl Write) -> Result<()> {
    let g = set.geometry();
    if g.dim() != 2 {
        return Err(Error::Format("PGM masks are 2D".into()));
    }
    let (w, h) = (g.extent()[0], g.extent()[1]);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let mut row = vec![0u8; w];
    for y in (0..h).rev() {
        for (x, px) in row.iter_mut().enumerate() {
            *px = if set.contains(g.index([x, y, 0])) { 255 } else { 0 };
        }
        out.write_all(&row)?;
    }
    Ok(())
}

fn pgm_header(bytes: &[u8]) -> Result<(usize, usize, usize, usize)> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|e| Error::Format(e.to_string()))?);
    }
    if fields[0] != "P5" {
        return Err(Error::Format(format!("expected P5, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|e| Error::Format(format!("bad PGM field {s}: {e}")));
    // a single whitespace byte separates the header from the raster
    Ok((num(fields[1])?, num(fields[2])?, num(fields[3])?, i + 1))
}

pub fn read_pgm(geometry: &GridGeometry, bytes: &[u8]) -> Result<CellSet> {
    if geometry.dim() != 2 {
        return Err(Error::Format("PGM masks are 2D".into()));
    }
    let (w, h, maxval, offset) = pgm_header(bytes)?;
    if [w, h] != [geometry.extent()[0], geometry.extent()[1]] {
        return Err(Error::Format(format!(
            "mask is {w}×{h}, grid is {}×{}",
            geometry.extent()[0],
            geometry.extent()[1]
        )));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    let data = bytes
        .get(offset..offset + w * h)
        .ok_or_else(|| Error::Format("truncated PGM raster".into()))?;
    let mut bits = vec![false; geometry.len()];
    for (r, line) in data.chunks(w).enumerate() {
        let y = h - 1 - r;
        for (x, &v) in line.iter().enumerate() {
            bits[geometry.index([x, y, 0])] = 2 * v as usize > maxval;
        }
    }
    CellSet::from_bits(geometry, bits)
}

pub fn write_text_mask(set: &CellSet, out: &mut impl Write) -> Result<()> {
    for &b in set.bits() {
        writeln!(out, "{}", b as u8)?;
    }
    Ok(())
}

pub fn read_text_mask(geometry: &GridGeometry, text: &str) -> Result<CellSet> {
    let bits = text
        .split_whitespace()
        .map(|t| match t {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(Error::Format(format!("mask entry {other} is not 0 or 1"))),
        })
        .collect::<Result<Vec<bool>>>()?;
    if bits.len() != geometry.len() {
        return Err(Error::Format(format!("mask has {} entries, grid has {}", bits.len(), geometry.len())));
    }
    CellSet::from_bits(geometry, bits)
}

/// Reads a mask in the format matching the grid dimension.
pub fn read_mask(geometry: &GridGeometry, path: &Path) -> Result<CellSet> {
    let bytes = fs::read(path)?;
    if geometry.dim() == 2 {
        read_pgm(geometry, &bytes)
    } else {
        read_text_mask(geometry, &String::from_utf8_lossy(&bytes))
    }
}

/// Writes the IN cells of `field`; FREE cells count as OUT.
pub fn write_mask(field: &PhaseField, path: &Path) -> Result<()> {
    let set = CellSet::from_fn(field.geometry(), |i| field.label(i) == Label::In);
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    if field.geometry().dim() == 2 {
        write_pgm(&set, &mut file)?;
    } else {
        write_text_mask(&set, &mut file)?;
    }
    file.flush()?;
    Ok(())
}
