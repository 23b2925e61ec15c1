//! Binary PGM (P5) files — the dataset's single image format. One byte per
//! pixel, maxval 255; trivially inspectable with any image viewer.

use std::path::Path;

use crate::error::{Error, Result};

/// A decoded grayscale image: row-major bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn write(path: &Path, img: &Gray) -> Result<()> {
    assert_eq!(
        img.pixels.len(),
        img.width * img.height,
        "pixel buffer does not match {}x{}",
        img.width,
        img.height
    );
    let mut bytes = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend_from_slice(&img.pixels);
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Gray> {
    let bytes = std::fs::read(path)?;
    let fail = |msg: String| Error::Parse {
        path: path.display().to_string(),
        line: 1,
        msg,
    };

    // header: "P5", width, height, maxval as ASCII tokens ('#' starts a
    // comment running to end of line), then a single whitespace byte
    let mut pos = 0;
    let mut token = |bytes: &[u8]| -> Option<String> {
        while pos < bytes.len() {
            match bytes[pos] {
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = token(&bytes).ok_or_else(|| fail("empty file".into()))?;
    if magic != "P5" {
        return Err(fail(format!("expected binary PGM magic P5, got `{magic}`")));
    }
    let mut dim = |what: &str| -> Result<usize> {
        token(&bytes)
            .ok_or_else(|| fail(format!("missing {what}")))?
            .parse::<usize>()
            .map_err(|_| fail(format!("{what} is not a number")))
    };
    let width = dim("width")?;
    let height = dim("height")?;
    let maxval = dim("maxval")?;
    if maxval != 255 {
        return Err(fail(format!("only maxval 255 is supported, got {maxval}")));
    }

    pos += 1; // the single whitespace byte after maxval
    let need = width * height;
    let data = bytes.get(pos..pos + need).ok_or_else(|| {
        fail(format!(
            "truncated pixel data: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        ))
    })?;
    Ok(Gray { width, height, pixels: data.to_vec() })
}
