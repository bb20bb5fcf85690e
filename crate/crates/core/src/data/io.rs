//! Dataset generation and the on-disk layout.
//!
//! ```text
//! DIR/genconfig.txt            generator settings, key=value
//! DIR/{train,valid}/manifest.tsv   "img/NNNNNN.pgm<TAB>transcript" rows
//! DIR/{train,valid}/img/*.pgm  binary 8-bit grayscale (P5, maxval 255)
//! ```

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{render_line, DataError, LineImage, RenderStyle};
use crate::ctc::Vocabulary;

pub const MANIFEST: &str = "manifest.tsv";
pub const GENCONFIG: &str = "genconfig.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            _ => Err(format!("unknown split {s:?} (expected train or valid)")),
        }
    }
}

/// Serialises as `P5\n<w> <h>\n255\n` followed by the raw bytes.
pub fn write_pgm(img: &LineImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Parses a binary PGM with maxval 255. `name` only labels errors.
pub fn read_pgm(bytes: &[u8], name: &str) -> Result<(usize, usize, Vec<u8>), DataError> {
    let fail = |offset: usize, reason: &str| DataError::MalformedPgm {
        path: name.to_string(),
        offset,
        reason: reason.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(fail(0, "missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(fail(pos, ["expected width", "expected height", "expected maxval"][k]));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| fail(start, "number out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(fail(pos, &format!("maxval {maxval} unsupported, only 255")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(fail(pos, "expected one whitespace byte after maxval"));
    }
    pos += 1;
    if width == 0 || height == 0 {
        return Err(fail(pos, "empty image"));
    }
    let body = &bytes[pos..];
    if body.len() != width * height {
        return Err(fail(
            pos,
            &format!("expected {} pixel bytes, found {}", width * height, body.len()),
        ));
    }
    Ok((width, height, body.to_vec()))
}

fn check_transcript(t: &str) -> Result<(), DataError> {
    if t.contains(['\t', '\n', '\r']) {
        return Err(DataError::InvalidConfig(format!(
            "transcript {t:?} contains a tab or line break"
        )));
    }
    Ok(())
}

/// Writes `dir/manifest.tsv` and `dir/img/NNNNNN.pgm`.
pub fn save_split(dir: &Path, lines: &[LineImage]) -> Result<(), DataError> {
    let img_dir = dir.join("img");
    fs::create_dir_all(&img_dir).map_err(|e| DataError::io(&img_dir, e))?;
    let mut manifest = String::new();
    for (i, line) in lines.iter().enumerate() {
        check_transcript(&line.transcript)?;
        let rel = format!("img/{i:06}.pgm");
        let path = dir.join(&rel);
        fs::write(&path, write_pgm(line)).map_err(|e| DataError::io(&path, e))?;
        manifest.push_str(&rel);
        manifest.push('\t');
        manifest.push_str(&line.transcript);
        manifest.push('\n');
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| DataError::io(&path, e))
}

/// Parses manifest text into `(relative path, transcript)` rows (1-based
/// row numbers in errors).
pub fn parse_manifest(text: &str, name: &str) -> Result<Vec<(String, String)>, DataError> {
    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fail = |reason: &str| DataError::MalformedManifest {
            path: name.to_string(),
            row: i + 1,
            reason: reason.to_string(),
        };
        let (path, transcript) = line
            .split_once('\t')
            .ok_or_else(|| fail("missing TAB between path and transcript"))?;
        if path.is_empty() {
            return Err(fail("empty image path"));
        }
        if transcript.contains('\t') {
            return Err(fail("more than two columns"));
        }
        if !seen.insert(path.to_string()) {
            return Err(fail(&format!("duplicate path {path}")));
        }
        rows.push((path.to_string(), transcript.to_string()));
    }
    Ok(rows)
}

/// Loads every image referenced by `dir/manifest.tsv`.
pub fn load_split(dir: &Path) -> Result<Vec<LineImage>, DataError> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| DataError::io(&mpath, e))?;
    parse_manifest(&text, &mpath.display().to_string())?
        .into_iter()
        .map(|(rel, transcript)| {
            let path = dir.join(&rel);
            let bytes = fs::read(&path).map_err(|e| DataError::io(&path, e))?;
            let (width, height, pixels) = read_pgm(&bytes, &path.display().to_string())?;
            LineImage::new(height, width, pixels, transcript)
        })
        .collect()
}

pub fn load_dataset(root: &Path, split: Split) -> Result<Vec<LineImage>, DataError> {
    load_split(&root.join(split.dir_name()))
}

/// Settings of the synthetic corpus generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub lines: usize,
    pub val_fraction: f64,
    pub alphabet: String,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    pub style: RenderStyle,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            lines: 1100,
            val_fraction: 1.0 / 11.0,
            alphabet: "0123456789".into(),
            min_len: 1,
            max_len: 12,
            seed: 0,
            style: RenderStyle::default(),
        }
    }
}

impl GenConfig {
    /// Number of validation lines: `round(lines · val_fraction)`.
    pub fn valid_count(&self) -> usize {
        (self.lines as f64 * self.val_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        if self.lines < 2 {
            return bad(format!("need at least 2 lines, got {}", self.lines));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        let nv = self.valid_count();
        if nv == 0 || nv >= self.lines {
            return bad(format!(
                "{} lines with fraction {} leave an empty split",
                self.lines, self.val_fraction
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!(
                "length range [{}, {}] is invalid",
                self.min_len, self.max_len
            ));
        }
        Vocabulary::new(&self.alphabet)
            .map_err(|e| DataError::InvalidConfig(format!("alphabet: {e}")))?;
        if let Some(c) = self.alphabet.chars().find(|&c| super::font::glyph(c).is_none()) {
            return Err(DataError::UnknownGlyph(c));
        }
        self.style.validate()
    }

    pub fn to_text(&self) -> String {
        let s = &self.style;
        let pairs: Vec<(&str, String)> = vec![
            ("lines", self.lines.to_string()),
            ("val_fraction", self.val_fraction.to_string()),
            ("alphabet", self.alphabet.clone()),
            ("min_len", self.min_len.to_string()),
            ("max_len", self.max_len.to_string()),
            ("seed", self.seed.to_string()),
            ("height", s.height.to_string()),
            ("glyph_scale", s.glyph_scale.to_string()),
            ("min_hscale", s.min_hscale.to_string()),
            ("max_hscale", s.max_hscale.to_string()),
            ("max_shear", s.max_shear.to_string()),
            ("max_jitter", s.max_jitter.to_string()),
            ("min_spacing", s.min_spacing.to_string()),
            ("max_spacing", s.max_spacing.to_string()),
            ("noise_sigma", s.noise_sigma.to_string()),
            ("min_background", s.min_background.to_string()),
            ("max_background", s.max_background.to_string()),
            ("max_ink", s.max_ink.to_string()),
            ("margin", s.margin.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Inverse of [`GenConfig::to_text`]; missing keys keep their defaults,
    /// unknown keys are errors. The alphabet value is taken verbatim so it
    /// may contain spaces.
    pub fn from_text(text: &str) -> Result<Self, DataError> {
        let mut c = GenConfig::default();
        for (n, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
                continue;
            }
            let (key, value) = raw.split_once('=').ok_or_else(|| {
                DataError::InvalidConfig(format!("line {}: expected key=value", n + 1))
            })?;
            let key = key.trim();
            let bad = || DataError::InvalidConfig(format!("line {}: bad value for {key}", n + 1));
            macro_rules! num {
                () => {
                    value.trim().parse().map_err(|_| bad())?
                };
            }
            let s = &mut c.style;
            match key {
                "lines" => c.lines = num!(),
                "val_fraction" => c.val_fraction = num!(),
                "alphabet" => c.alphabet = value.to_string(),
                "min_len" => c.min_len = num!(),
                "max_len" => c.max_len = num!(),
                "seed" => c.seed = num!(),
                "height" => s.height = num!(),
                "glyph_scale" => s.glyph_scale = num!(),
                "min_hscale" => s.min_hscale = num!(),
                "max_hscale" => s.max_hscale = num!(),
                "max_shear" => s.max_shear = num!(),
                "max_jitter" => s.max_jitter = num!(),
                "min_spacing" => s.min_spacing = num!(),
                "max_spacing" => s.max_spacing = num!(),
                "noise_sigma" => s.noise_sigma = num!(),
                "min_background" => s.min_background = num!(),
                "max_background" => s.max_background = num!(),
                "max_ink" => s.max_ink = num!(),
                "margin" => s.margin = num!(),
                _ => {
                    return Err(DataError::InvalidConfig(format!(
                        "line {}: unknown key {key:?}",
                        n + 1
                    )))
                }
            }
        }
        Ok(c)
    }
}

/// Draws random texts and renders them; the last `valid_count()` lines form
/// the validation split.
pub fn generate_dataset(config: &GenConfig) -> Result<(Vec<LineImage>, Vec<LineImage>), DataError> {
    config.validate()?;
    let alphabet: Vec<char> = config.alphabet.chars().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut lines = Vec::with_capacity(config.lines);
    for _ in 0..config.lines {
        let len = rng.gen_range(config.min_len..=config.max_len);
        let text: String = (0..len)
            .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
            .collect();
        lines.push(render_line(&text, &mut rng, &config.style)?);
    }
    let valid = lines.split_off(config.lines - config.valid_count());
    Ok((lines, valid))
}

/// Generates a corpus and writes it under `root`. Returns the split sizes.
pub fn write_dataset(root: &Path, config: &GenConfig) -> Result<(usize, usize), DataError> {
    let (train, valid) = generate_dataset(config)?;
    fs::create_dir_all(root).map_err(|e| DataError::io(root, e))?;
    let path = root.join(GENCONFIG);
    fs::write(&path, config.to_text()).map_err(|e| DataError::io(&path, e))?;
    save_split(&root.join(Split::Train.dir_name()), &train)?;
    save_split(&root.join(Split::Valid.dir_name()), &valid)?;
    Ok((train.len(), valid.len()))
}

/// Reads `root/genconfig.txt` when present.
pub fn read_genconfig(root: &Path) -> Result<Option<GenConfig>, DataError> {
    let path = root.join(GENCONFIG);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
    GenConfig::from_text(&text).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(lines: usize) -> GenConfig {
        GenConfig {
            lines,
            val_fraction: 0.1,
            max_len: 5,
            seed: 11,
            ..GenConfig::default()
        }
    }

    #[test]
    fn pgm_round_trip() {
        let img = LineImage::new(2, 3, vec![0, 1, 2, 253, 254, 255], "x".into()).unwrap();
        let bytes = write_pgm(&img);
        assert_eq!(read_pgm(&bytes, "t").unwrap(), (3, 2, img.pixels.clone()));
        let commented = b"P5\n# made by hand\n3 2\n255\n\x00\x01\x02\xfd\xfe\xff";
        assert_eq!(read_pgm(commented, "t").unwrap().2, img.pixels);
    }

    #[test]
    fn pgm_errors() {
        let err = read_pgm(b"P5\n3 2\n65535\n", "x.pgm").unwrap_err();
        assert!(matches!(err, DataError::MalformedPgm { ref reason, .. } if reason.contains("maxval")));
        assert!(read_pgm(b"P2\n1 1\n255\n0", "x").is_err());
        assert!(read_pgm(b"P5\n2 2\n255\n\x00", "x").is_err());
        assert!(read_pgm(b"P5\nab\n", "x").is_err());
    }

    #[test]
    fn manifest_errors_name_the_row() {
        let err = parse_manifest("img/a.pgm\tab\nimg/b.pgm ab\n", "m.tsv").unwrap_err();
        assert_eq!(
            err,
            DataError::MalformedManifest {
                path: "m.tsv".into(),
                row: 2,
                reason: "missing TAB between path and transcript".into()
            }
        );
        assert!(parse_manifest("a\tx\na\ty\n", "m").is_err());
        assert_eq!(parse_manifest("a\t\n", "m").unwrap()[0].1, "");
    }

    #[test]
    fn split_sizes() {
        let c = GenConfig {
            lines: 1000,
            val_fraction: 0.1,
            ..GenConfig::default()
        };
        assert_eq!(c.valid_count(), 100);
        let (train, valid) = generate_dataset(&small_config(20)).unwrap();
        assert_eq!((train.len(), valid.len()), (18, 2));
        let alphabet = "0123456789";
        assert!(train
            .iter()
            .all(|l| (1..=5).contains(&l.transcript.len())
                && l.transcript.chars().all(|c| alphabet.contains(c))));
    }

    #[test]
    fn invalid_configs() {
        let dup = GenConfig {
            alphabet: "abca".into(),
            ..small_config(10)
        };
        assert!(matches!(dup.validate(), Err(DataError::InvalidConfig(_))));
        assert!(small_config(1).validate().is_err());
        let frac = GenConfig {
            val_fraction: 1.0,
            ..small_config(10)
        };
        assert!(frac.validate().is_err());
        let glyph = GenConfig {
            alphabet: "ab€".into(),
            ..small_config(10)
        };
        assert_eq!(glyph.validate(), Err(DataError::UnknownGlyph('€')));
    }

    #[test]
    fn genconfig_text_round_trip() {
        let c = GenConfig {
            alphabet: "a b".into(),
            style: noise_sigma_for_test(),
            ..small_config(7)
        };
        assert_eq!(GenConfig::from_text(&c.to_text()).unwrap(), c);
        assert!(GenConfig::from_text("colour=red\n").is_err());
    }

    fn noise_sigma_for_test() -> RenderStyle {
        RenderStyle {
            noise_sigma: 3.5,
            ..RenderStyle::default()
        }
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = small_config(30);
        assert_eq!(write_dataset(dir.path(), &c).unwrap(), (27, 3));
        let (train, valid) = generate_dataset(&c).unwrap();
        assert_eq!(load_dataset(dir.path(), Split::Train).unwrap(), train);
        assert_eq!(load_dataset(dir.path(), Split::Valid).unwrap(), valid);
        assert_eq!(read_genconfig(dir.path()).unwrap(), Some(c));
    }
}
