use serde::{Deserialize, Serialize};

use crate::data_io::Mask;
use crate::error::{ensure, Error, Result};
use crate::scalar::Real;
use crate::tensor_core::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorFilter {
    SetRed,
    SetGreen,
    SetBlue,
    Rotate120,
    Rotate240,
    Grayscale,
}

impl ColorFilter {
    pub const ALL: [ColorFilter; 6] = [
        ColorFilter::SetRed,
        ColorFilter::SetGreen,
        ColorFilter::SetBlue,
        ColorFilter::Rotate120,
        ColorFilter::Rotate240,
        ColorFilter::Grayscale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ColorFilter::SetRed => "set_red",
            ColorFilter::SetGreen => "set_green",
            ColorFilter::SetBlue => "set_blue",
            ColorFilter::Rotate120 => "rotate120",
            ColorFilter::Rotate240 => "rotate240",
            ColorFilter::Grayscale => "grayscale",
        }
    }

    fn hue(self, h: f64) -> f64 {
        match self {
            ColorFilter::SetRed => 0.0,
            ColorFilter::SetGreen => 120.0,
            ColorFilter::SetBlue => 240.0,
            ColorFilter::Rotate120 => (h + 120.0).rem_euclid(360.0),
            ColorFilter::Rotate240 => (h + 240.0).rem_euclid(360.0),
            ColorFilter::Grayscale => h,
        }
    }
}

impl std::str::FromStr for ColorFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Contract(format!("unknown color filter {s:?}")))
    }
}

/// `(h, s, v)` with hue in degrees `[0, 360)`.
pub fn rgb_to_hsv(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [h.rem_euclid(360.0), s, max]
}

pub fn hsv_to_rgb(hsv: [f64; 3]) -> [f64; 3] {
    crate::data_io::shapes::hsv_to_rgb(hsv[0], hsv[1], hsv[2])
}

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Applies `filter` to the pixels of `image` (`[H x W x 3]`) inside `mask`;
/// pixels outside are copied unchanged. Grayscale ignores the mask and
/// replaces every pixel by its luma.
pub fn apply_color_filter<T: Real>(image: &Tensor<T>, mask: &Mask, filter: ColorFilter) -> Result<Tensor<T>> {
    let s = image.shape();
    ensure!(s.len() == 3 && s[2] == 3, "image must be [H, W, 3], got {s:?}");
    ensure!(
        mask.height == s[0] && mask.width == s[1],
        "mask {}x{} does not match image {}x{}",
        mask.height,
        mask.width,
        s[0],
        s[1]
    );
    let mut out = image.clone();
    for (p, px) in out.data_mut().chunks_exact_mut(3).enumerate() {
        let rgb = [px[0].as_f64(), px[1].as_f64(), px[2].as_f64()];
        let new = match filter {
            ColorFilter::Grayscale => {
                let y = LUMA[0] * rgb[0] + LUMA[1] * rgb[1] + LUMA[2] * rgb[2];
                [y; 3]
            }
            _ if !mask.bits[p] => continue,
            _ => {
                let [h, sat, v] = rgb_to_hsv(rgb);
                hsv_to_rgb([filter.hue(h), sat, v])
            }
        };
        for (d, v) in px.iter_mut().zip(new) {
            *d = T::lit(v);
        }
    }
    Ok(out)
}
