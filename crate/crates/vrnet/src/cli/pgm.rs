//! Plain (P2) PGM with maxval 1: the image exchange format. Trivially
//! parsable anywhere, no image-library dependency, and binary by
//! construction. Pixel value 1 marks phase 1 (the indicator), 0 phase 0.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::microgen::MicroImage;

pub fn write_pgm(img: &MicroImage, path: &Path) -> Result<()> {
    if !img.is_binary() {
        return Err(Error::InvalidArgument("PGM export needs a binary image".into()));
    }
    let mut out = String::with_capacity(img.values().len() * 2 + 32);
    out.push_str("P2\n");
    out.push_str(&format!("{} {}\n1\n", img.width(), img.height()));
    for row in 0..img.height() {
        let mut line = String::with_capacity(img.width() * 2);
        for col in 0..img.width() {
            if col > 0 {
                line.push(' ');
            }
            line.push(if img.get(row, col) >= 0.5 { '1' } else { '0' });
        }
        line.push('\n');
        out.push_str(&line);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<MicroImage> {
    let text = fs::read_to_string(path)?;
    parse_pgm(&text)
}

pub fn parse_pgm(text: &str) -> Result<MicroImage> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(|l| l.split_whitespace());
    let magic = tokens.next().ok_or_else(|| Error::Parse("empty PGM".into()))?;
    if magic != "P2" {
        return Err(Error::Parse(format!("unsupported PGM magic '{magic}', want P2")));
    }
    let mut next_usize = |what: &str| -> Result<usize> {
        tokens
            .next()
            .ok_or_else(|| Error::Parse(format!("PGM missing {what}")))?
            .parse()
            .map_err(|e| Error::Parse(format!("PGM {what}: {e}")))
    };
    let width = next_usize("width")?;
    let height = next_usize("height")?;
    let maxval = next_usize("maxval")?;
    if maxval == 0 {
        return Err(Error::Parse("PGM maxval must be positive".into()));
    }
    let mut values = Vec::with_capacity(width * height);
    for tok in tokens {
        let v: usize = tok.parse().map_err(|e| Error::Parse(format!("PGM pixel: {e}")))?;
        if v > maxval {
            return Err(Error::Parse(format!("pixel {v} exceeds maxval {maxval}")));
        }
        // binarize against the midpoint so maxval 255 binary masks also load
        values.push(if v * 2 >= maxval { 1.0 } else { 0.0 });
    }
    if values.len() != width * height {
        return Err(Error::Parse(format!(
            "PGM holds {} pixels, header says {}",
            values.len(),
            width * height
        )));
    }
    MicroImage::from_values(width, height, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fftsolver::{laminate_image, Axis};

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = laminate_image(8, 3, Axis::X1).unwrap();
        let path = dir.path().join("t.pgm");
        write_pgm(&img, &path).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(img.values(), back.values());
        assert_eq!((img.width(), img.height()), (back.width(), back.height()));
    }

    #[test]
    fn parses_with_comments_and_rejects_garbage() {
        let img = parse_pgm("P2\n# comment\n2 2\n1\n0 1\n1 0\n").unwrap();
        assert_eq!(img.values(), &[0.0, 1.0, 1.0, 0.0]);
        assert!(parse_pgm("P5\n2 2\n1\n0 1 1 0\n").is_err());
        assert!(parse_pgm("P2\n2 2\n1\n0 1 1\n").is_err());
        assert!(parse_pgm("P2\n2 2\n1\n0 1 1 2\n").is_err());
    }
}
