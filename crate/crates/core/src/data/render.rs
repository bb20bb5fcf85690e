//! Synthetic text-line renderer.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::font::{glyph, ink, Glyph, GLYPH_HEIGHT, GLYPH_WIDTH};
use super::{DataError, LineImage};

/// Random style bounds for [`render_line`].
#[derive(Debug, Clone, PartialEq)]
pub struct RenderStyle {
    /// Output image height in pixels.
    pub height: usize,
    /// Pixels per font cell, vertically and (before the per-character
    /// horizontal scale) horizontally.
    pub glyph_scale: f64,
    pub min_hscale: f64,
    pub max_hscale: f64,
    /// Shear is drawn uniformly from `[-max_shear, max_shear]`.
    pub max_shear: f64,
    /// Vertical jitter in pixels, drawn from `[-max_jitter, max_jitter]`.
    pub max_jitter: usize,
    pub min_spacing: usize,
    pub max_spacing: usize,
    pub noise_sigma: f64,
    pub min_background: u8,
    pub max_background: u8,
    pub max_ink: u8,
    /// Blank columns on each side; also absorbs shear overhang.
    pub margin: usize,
}

impl Default for RenderStyle {
    fn default() -> Self {
        Self {
            height: 32,
            glyph_scale: 3.0,
            min_hscale: 0.8,
            max_hscale: 1.4,
            max_shear: 0.3,
            max_jitter: 2,
            min_spacing: 1,
            max_spacing: 4,
            noise_sigma: 8.0,
            min_background: 200,
            max_background: 255,
            max_ink: 60,
            margin: 8,
        }
    }
}

impl RenderStyle {
    fn glyph_height(&self) -> usize {
        (GLYPH_HEIGHT as f64 * self.glyph_scale).round() as usize
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidStyle(m));
        if !(self.glyph_scale > 0.0) || self.glyph_height() + 2 * self.max_jitter > self.height {
            return bad(format!(
                "glyphs of scale {} with jitter {} do not fit height {}",
                self.glyph_scale, self.max_jitter, self.height
            ));
        }
        if !(0.0 < self.min_hscale && self.min_hscale <= self.max_hscale) {
            return bad("horizontal scale range is empty or non-positive".into());
        }
        if self.min_spacing > self.max_spacing || self.min_background > self.max_background {
            return bad("spacing or background range is empty".into());
        }
        if !(self.max_shear >= 0.0 && self.noise_sigma >= 0.0) {
            return bad("shear and noise must be non-negative".into());
        }
        Ok(())
    }
}

struct Placed {
    glyph: &'static Glyph,
    x0: f64,
    width: f64,
    top: f64,
    shear: f64,
}

/// Renders `text` as a grayscale line image.
///
/// Per-character geometry is drawn first, in text order, so a prefix of a
/// text gets the same layout under the same seed and the image width grows
/// strictly with every appended character.
pub fn render_line<R: Rng + ?Sized>(
    text: &str,
    rng: &mut R,
    style: &RenderStyle,
) -> Result<LineImage, DataError> {
    style.validate()?;
    if text.is_empty() {
        return Err(DataError::EmptyText);
    }
    let glyphs = text
        .chars()
        .map(|c| glyph(c).ok_or(DataError::UnknownGlyph(c)))
        .collect::<Result<Vec<_>, _>>()?;

    let gh = style.glyph_height() as f64;
    let centre_top = (style.height as f64 - gh) / 2.0;
    let mut placed = Vec::with_capacity(glyphs.len());
    let mut cursor = style.margin;
    for (i, g) in glyphs.into_iter().enumerate() {
        let hscale = rng.gen_range(style.min_hscale..=style.max_hscale);
        let shear = rng.gen_range(-style.max_shear..=style.max_shear);
        let jitter = rng.gen_range(-(style.max_jitter as i64)..=style.max_jitter as i64);
        let spacing = rng.gen_range(style.min_spacing..=style.max_spacing);
        if i > 0 {
            cursor += spacing;
        }
        let width = ((GLYPH_WIDTH as f64 * style.glyph_scale * hscale).round() as usize).max(1);
        placed.push(Placed {
            glyph: g,
            x0: cursor as f64,
            width: width as f64,
            top: (centre_top + jitter as f64).round(),
            shear,
        });
        cursor += width;
    }
    let width = cursor + style.margin;
    let height = style.height;

    let mut inked = vec![false; width * height];
    for p in &placed {
        let mid = p.top + gh / 2.0;
        let reach = (style.max_shear * gh / 2.0).ceil() + 1.0;
        let x_lo = (p.x0 - reach).max(0.0) as usize;
        let x_hi = ((p.x0 + p.width + reach) as usize).min(width);
        for y in (p.top as usize)..((p.top + gh) as usize).min(height) {
            let yc = y as f64 + 0.5;
            let fy = (yc - p.top) / gh * GLYPH_HEIGHT as f64;
            let row = fy as usize;
            if row >= GLYPH_HEIGHT {
                continue;
            }
            let offset = p.shear * (mid - yc);
            for x in x_lo..x_hi {
                let fx = (x as f64 + 0.5 - p.x0 - offset) / p.width * GLYPH_WIDTH as f64;
                if (0.0..GLYPH_WIDTH as f64).contains(&fx) && ink(p.glyph, row, fx as usize) {
                    inked[y * width + x] = true;
                }
            }
        }
    }

    let background = rng.gen_range(style.min_background..=style.max_background) as f64;
    let ink_level = rng.gen_range(0..=style.max_ink) as f64;
    let noise = Normal::new(0.0, style.noise_sigma).expect("non-negative sigma");
    let pixels = inked
        .into_iter()
        .map(|on| {
            let base = if on { ink_level } else { background };
            (base + noise.sample(rng)).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    LineImage::new(height, width, pixels, text.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn deterministic_per_seed() {
        let style = RenderStyle::default();
        let a = render_line("hello 42", &mut ChaCha8Rng::seed_from_u64(5), &style).unwrap();
        let b = render_line("hello 42", &mut ChaCha8Rng::seed_from_u64(5), &style).unwrap();
        let c = render_line("hello 42", &mut ChaCha8Rng::seed_from_u64(6), &style).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.pixels, c.pixels);
        assert_eq!(a.height, 32);
    }

    #[test]
    fn width_grows_with_text() {
        let style = RenderStyle::default();
        let text = "0123456789abcdefghij";
        let mut last = 0;
        for n in 1..=text.len() {
            let img = render_line(&text[..n], &mut ChaCha8Rng::seed_from_u64(9), &style).unwrap();
            assert!(img.width > last);
            last = img.width;
        }
    }

    #[test]
    fn ink_is_darker_than_background() {
        let style = RenderStyle {
            noise_sigma: 0.0,
            ..RenderStyle::default()
        };
        let img = render_line("8", &mut ChaCha8Rng::seed_from_u64(1), &style).unwrap();
        let dark = img.pixels.iter().filter(|&&p| p <= 60).count();
        let light = img.pixels.iter().filter(|&&p| p >= 200).count();
        assert!(dark > 20);
        assert_eq!(dark + light, img.pixels.len());
        let blank = render_line(" ", &mut ChaCha8Rng::seed_from_u64(1), &style).unwrap();
        assert!(blank.pixels.iter().all(|&p| p >= 200));
    }

    #[test]
    fn errors() {
        let style = RenderStyle::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(render_line("a€", &mut rng, &style), Err(DataError::UnknownGlyph('€')));
        assert_eq!(render_line("", &mut rng, &style), Err(DataError::EmptyText));
        let cramped = RenderStyle {
            height: 16,
            ..RenderStyle::default()
        };
        assert!(matches!(
            render_line("a", &mut rng, &cramped),
            Err(DataError::InvalidStyle(_))
        ));
    }
}
