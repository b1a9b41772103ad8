//! Image files, dataset directories and flow checkpoints.
//!
//! Two image formats are supported: 16-bit binary PGM (`P5`, maxval 65535)
//! and a lossless float format (`BHIMG01`, then height and width as u32 LE,
//! then `height * width` f64 LE). Checkpoints are `BHFLOW01`, six u32 LE
//! architecture fields, a u64 LE parameter count, the parameters as f64 LE,
//! and a trailing CRC-32 over every preceding byte.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::flow::{FlowArchitecture, FlowModel};
use crate::numeric::{minmax_normalize, ImageGrid};
use crate::train::TargetDataset;

pub const FLOAT_MAGIC: &[u8; 7] = b"BHIMG01";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BHFLOW01";
const PGM_MAXVAL: u32 = 65535;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Pgm,
    Float,
}

impl ImageFormat {
    /// `.pgm` selects PGM, anything else the float format.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("pgm") => ImageFormat::Pgm,
            _ => ImageFormat::Float,
        }
    }
}

/// Byte cursor that reports truncation with the offending offset.
struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self { path, bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::UnexpectedEof {
                path: self.path.to_path_buf(),
                offset: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn format_err(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes via a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn checked_pixels(r: &Reader<'_>, h: usize, w: usize) -> Result<usize> {
    if h == 0 || w == 0 {
        return Err(r.format_err(format!("empty image {h}x{w}")));
    }
    h.checked_mul(w)
        .filter(|n| n.checked_mul(8).is_some())
        .ok_or_else(|| r.format_err(format!("dimensions {h}x{w} overflow")))
}

fn decode_float(path: &Path, bytes: &[u8]) -> Result<ImageGrid> {
    let mut r = Reader::new(path, bytes);
    if r.take(FLOAT_MAGIC.len())? != FLOAT_MAGIC {
        return Err(r.format_err("bad magic"));
    }
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let n = checked_pixels(&r, h, w)?;
    let mut data = Vec::with_capacity(n.min(bytes.len() / 8));
    for _ in 0..n {
        data.push(r.f64()?);
    }
    ImageGrid::new(h, w, data)
}

/// Skips whitespace and `#` comments, then parses one unsigned decimal.
fn pgm_token(r: &mut Reader<'_>) -> Result<usize> {
    loop {
        let b = r.take(1)?[0];
        if b == b'#' {
            while r.take(1)?[0] != b'\n' {}
        } else if !b.is_ascii_whitespace() {
            r.pos -= 1;
            break;
        }
    }
    let start = r.pos;
    while r.pos < r.bytes.len() && r.bytes[r.pos].is_ascii_digit() {
        r.pos += 1;
    }
    if r.pos == start {
        if r.pos == r.bytes.len() {
            return Err(Error::UnexpectedEof {
                path: r.path.to_path_buf(),
                offset: r.pos,
            });
        }
        return Err(r.format_err(format!("expected a number at byte {start}")));
    }
    std::str::from_utf8(&r.bytes[start..r.pos])
        .expect("ascii digits")
        .parse()
        .map_err(|_| r.format_err(format!("number too large at byte {start}")))
}

fn decode_pgm(path: &Path, bytes: &[u8]) -> Result<ImageGrid> {
    let mut r = Reader::new(path, bytes);
    if r.take(2)? != b"P5" {
        return Err(r.format_err("bad magic"));
    }
    let w = pgm_token(&mut r)?;
    let h = pgm_token(&mut r)?;
    let maxval = pgm_token(&mut r)?;
    if maxval != PGM_MAXVAL as usize {
        return Err(r.format_err(format!("maxval must be 65535, got {maxval}")));
    }
    let sep = r.take(1)?[0];
    if !sep.is_ascii_whitespace() {
        return Err(r.format_err("missing whitespace after header"));
    }
    let n = checked_pixels(&r, h, w)?;
    let mut data = Vec::with_capacity(n.min(bytes.len() / 2));
    for _ in 0..n {
        let s = r.take(2)?;
        data.push(u16::from_be_bytes([s[0], s[1]]) as f64 / PGM_MAXVAL as f64);
    }
    ImageGrid::new(h, w, data)
}

/// Reads either format, chosen by the file's magic bytes.
pub fn read_image(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let path = path.as_ref();
    decode_image(path, &read_bytes(path)?)
}

/// Decodes image bytes of either format; `path` only labels errors.
pub fn decode_image(path: &Path, bytes: &[u8]) -> Result<ImageGrid> {
    if bytes.starts_with(b"P5") {
        decode_pgm(path, bytes)
    } else if bytes.starts_with(FLOAT_MAGIC) {
        decode_float(path, bytes)
    } else if FLOAT_MAGIC.starts_with(bytes) || b"P5".starts_with(bytes) {
        Err(Error::UnexpectedEof {
            path: path.to_path_buf(),
            offset: bytes.len(),
        })
    } else {
        Err(Error::Format {
            path: path.to_path_buf(),
            reason: "unrecognized image format".into(),
        })
    }
}

pub fn encode_image(img: &ImageGrid, format: ImageFormat) -> Result<Vec<u8>> {
    let (h, w) = img.dims();
    match format {
        ImageFormat::Float => {
            let mut out = Vec::with_capacity(15 + 8 * img.len());
            out.extend_from_slice(FLOAT_MAGIC);
            out.extend_from_slice(&(h as u32).to_le_bytes());
            out.extend_from_slice(&(w as u32).to_le_bytes());
            for v in img.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            Ok(out)
        }
        ImageFormat::Pgm => {
            img.ensure_finite("pgm output")?;
            let mut out = format!("P5\n{w} {h}\n{PGM_MAXVAL}\n").into_bytes();
            for v in img.data() {
                let q = (v.clamp(0.0, 1.0) * PGM_MAXVAL as f64).round() as u16;
                out.extend_from_slice(&q.to_be_bytes());
            }
            Ok(out)
        }
    }
}

/// Writes `img` in the format implied by the extension of `path`.
pub fn write_image(path: impl AsRef<Path>, img: &ImageGrid) -> Result<()> {
    let path = path.as_ref();
    write_atomic(path, &encode_image(img, ImageFormat::for_path(path))?)
}

/// Regular files of `dir`, sorted by file name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let name = entry.file_name();
        let hidden = name.to_string_lossy().starts_with('.');
        if path.is_file() && !hidden && name != "manifest.txt" {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Reads every image in `dir` without normalizing, in sorted order, and
/// checks that all dimensions agree.
pub fn read_image_dir(dir: impl AsRef<Path>) -> Result<Vec<(PathBuf, ImageGrid)>> {
    let dir = dir.as_ref();
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} contains no images",
            dir.display()
        )));
    }
    let mut out: Vec<(PathBuf, ImageGrid)> = Vec::with_capacity(files.len());
    for path in files {
        let img = read_image(&path)?;
        if let Some((first_path, first)) = out.first() {
            if first.dims() != img.dims() {
                return Err(Error::Dimension(format!(
                    "{} is {}x{} but {} is {}x{}",
                    first_path.display(),
                    first.height(),
                    first.width(),
                    path.display(),
                    img.height(),
                    img.width()
                )));
            }
        }
        out.push((path, img));
    }
    Ok(out)
}

/// Loads and min-max normalizes every image in `dir`.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<TargetDataset> {
    let images = read_image_dir(dir)?
        .into_iter()
        .map(|(_, img)| minmax_normalize(&img))
        .collect::<Result<Vec<_>>>()?;
    TargetDataset::new(images)
}

pub fn encode_checkpoint(model: &FlowModel) -> Vec<u8> {
    let a = model.arch();
    let params = model.params();
    let mut out = Vec::with_capacity(8 + 24 + 8 + 8 * params.len() + 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [
        a.levels,
        a.steps_per_level,
        a.coupling_hidden_width,
        a.coupling_hidden_layers,
        a.input_height,
        a.input_width,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<FlowModel> {
    let mut r = Reader::new(path, bytes);
    let magic = r.take(8)?;
    if magic != CHECKPOINT_MAGIC {
        if magic.starts_with(b"BHFLOW") {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        return Err(r.format_err("not a checkpoint (bad magic)"));
    }
    if bytes.len() < 8 + 24 + 8 + 4 {
        return Err(Error::UnexpectedEof {
            path: path.to_path_buf(),
            offset: bytes.len(),
        });
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Crc {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    let mut fields = [0usize; 6];
    for f in &mut fields {
        *f = r.u32()? as usize;
    }
    let arch = FlowArchitecture {
        levels: fields[0],
        steps_per_level: fields[1],
        coupling_hidden_width: fields[2],
        coupling_hidden_layers: fields[3],
        input_height: fields[4],
        input_width: fields[5],
    };
    arch.validate().map_err(|e| r.format_err(e.to_string()))?;
    let count = r.u64()?;
    let expected = arch.parameter_count() as u64;
    if count != expected {
        return Err(r.format_err(format!(
            "parameter count {count} does not match architecture ({expected})"
        )));
    }
    if (body.len() - r.pos) as u64 != count * 8 {
        return Err(r.format_err(format!(
            "{} parameter bytes present, expected {}",
            body.len() - r.pos,
            count * 8
        )));
    }
    let params = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    FlowModel::from_parameters(arch, params)
}

pub fn save_checkpoint(model: &FlowModel, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(model))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<FlowModel> {
    let path = path.as_ref();
    decode_checkpoint(path, &read_bytes(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, h: usize, w: usize) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageGrid::from_fn(h, w, |_, _| rng.gen::<f64>())
    }

    #[test]
    fn float_roundtrip_is_bit_exact() {
        let img = random(1, 5, 7);
        let bytes = encode_image(&img, ImageFormat::Float).unwrap();
        assert_eq!(decode_float(Path::new("x"), &bytes).unwrap(), img);
    }

    #[test]
    fn pgm_roundtrip_within_quantization() {
        let img = random(2, 6, 3);
        let bytes = encode_image(&img, ImageFormat::Pgm).unwrap();
        let back = decode_pgm(Path::new("x"), &bytes).unwrap();
        assert_eq!(back.dims(), (6, 3));
        assert!(back.max_abs_diff(&img) <= 1.0 / 65535.0);
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let mut bytes = b"P5 # comment\n2 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0xff, 0xff, 0x00, 0x00]);
        let img = decode_pgm(Path::new("x"), &bytes).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0]);
    }

    #[test]
    fn pgm_rejects_other_maxval() {
        let bytes = b"P5\n1 1\n255\n\x01".to_vec();
        assert!(matches!(
            decode_pgm(Path::new("x"), &bytes),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_image(&random(3, 4, 4), ImageFormat::Float).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        let err = decode_float(Path::new("x"), cut).unwrap_err();
        assert!(matches!(err, Error::UnexpectedEof { offset, .. } if offset == cut.len()));
        assert!(err
            .to_string()
            .contains(&format!("unexpected end of file at byte {}", cut.len())));
    }

    #[test]
    fn overflowing_dimensions_are_rejected() {
        let mut bytes = FLOAT_MAGIC.to_vec();
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_float(Path::new("x"), &bytes).is_err());
    }

    #[test]
    fn extension_picks_format() {
        assert_eq!(ImageFormat::for_path(Path::new("a/b.PGM")), ImageFormat::Pgm);
        assert_eq!(ImageFormat::for_path(Path::new("a/b.bhimg")), ImageFormat::Float);
    }
}
