//! Binary PPM (P6, maxval 255) images. In-memory images are `[H x W x 3]`
//! tensors with values in `[0, 1]`.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor_core::Tensor;

pub fn write_ppm<T: Real>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let s = image.shape();
    crate::error::ensure!(s.len() == 3 && s[2] == 3, "ppm image must be [H, W, 3], got {s:?}");
    let mut out = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(image.data().iter().map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn fail<X>(&self, reason: impl Into<String>) -> Result<X> {
        Err(Error::Ppm { offset: self.pos, reason: reason.into() })
    }

    fn skip_space(&mut self) -> Result<()> {
        let start = self.pos;
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
        if self.pos == start {
            return self.fail("expected whitespace");
        }
        Ok(())
    }

    fn number(&mut self) -> Result<usize> {
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if self.pos == start {
            return self.fail("expected decimal integer");
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        text.parse().or_else(|_| {
            self.pos = start;
            self.fail("integer out of range")
        })
    }
}

pub fn read_ppm<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut c = Cursor { bytes, pos: 0 };
    if !bytes.starts_with(b"P6") {
        return c.fail("missing P6 magic");
    }
    c.pos = 2;
    c.skip_space()?;
    let width = c.number()?;
    c.skip_space()?;
    let height = c.number()?;
    c.skip_space()?;
    let maxval_at = c.pos;
    let maxval = c.number()?;
    if maxval != 255 {
        c.pos = maxval_at;
        return c.fail(format!("unsupported maxval {maxval}"));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return c.fail("expected single whitespace before raster"),
    }
    if width == 0 || height == 0 {
        return c.fail("zero image extent");
    }
    let need = width.checked_mul(height).and_then(|n| n.checked_mul(3));
    let Some(need) = need else { return c.fail("image extents overflow") };
    let raster = &bytes[c.pos..];
    if raster.len() < need {
        c.pos = bytes.len();
        return c.fail(format!("truncated raster: {} of {need} bytes", raster.len()));
    }
    if raster.len() > need {
        c.pos += need;
        return c.fail("trailing bytes after raster");
    }
    let scale = T::lit(255.0);
    let data = raster.iter().map(|&b| T::lit(f64::from(b)) / scale).collect();
    Tensor::new([height, width, 3], data)
}
