//! Frame files: binary PGM (gray) and PPM (RGB, converted to luma) in,
//! binary PGM out, and sequence directories of `frame_%06d.pgm`.

use std::fs;
use std::path::{Path, PathBuf};

use dfpn_core::data::{generate_synthetic, luma, FrameSequence, Pattern, SyntheticSpec};
use dfpn_core::eval::to_u8;
use dfpn_core::Real;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat};

use crate::{Error, Result};

/// An 8-bit gray image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

/// Decode a binary PGM or PPM; color is reduced to luma.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Pnm).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        DynamicImage::ImageLuma8(g) => g.into_raw(),
        DynamicImage::ImageRgb8(rgb) => rgb.pixels().map(|p| luma(p[0], p[1], p[2])).collect(),
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("unsupported pixel format {:?}; expected 8-bit gray or RGB", other.color()),
            })
        }
    };
    Ok(GrayImage { h, w, data })
}

pub fn read_frame(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode_pnm(&bytes, path)
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&img.data, img.w as u32, img.h as u32, ExtendedColorType::L8)
        .expect("in-memory PGM encoding");
    out
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    fs::write(path, encode_pgm(img)).map_err(Error::io(path))
}

/// `[0, 1]` samples to an 8-bit image (scale, clamp, round).
pub fn to_gray<S: Real>(h: usize, w: usize, values: &[S]) -> GrayImage {
    GrayImage {
        h,
        w,
        data: values.iter().map(|&v| to_u8(v)).collect(),
    }
}

fn is_frame_file(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("pgm") || e.eq_ignore_ascii_case("ppm"))
}

/// Frame files of a directory in lexicographic order.
pub fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(Error::io(dir))? {
        let p = entry.map_err(Error::io(dir))?.path();
        if is_frame_file(&p) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Load every `.pgm`/`.ppm` in `dir`, sorted by file name, as one sequence
/// with values in `[0, 1]`.
pub fn load_sequence<S: Real>(dir: &Path) -> Result<FrameSequence<S>> {
    let files = frame_files(dir)?;
    if files.is_empty() {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            msg: "no .pgm or .ppm frames found".into(),
        });
    }
    let mut frames = Vec::with_capacity(files.len());
    let mut size = None;
    for f in &files {
        let img = read_frame(f)?;
        match size {
            None => size = Some((img.h, img.w)),
            Some((h, w)) if (h, w) != (img.h, img.w) => {
                return Err(Error::Format {
                    path: f.clone(),
                    msg: format!("frame is {}x{} but earlier frames are {}x{}", img.w, img.h, w, h),
                })
            }
            _ => {}
        }
        frames.push(img.data);
    }
    let (h, w) = size.expect("at least one frame");
    Ok(FrameSequence::from_u8(h, w, &frames, dir.display().to_string())?)
}

/// Sequence directories under `root`: `root` itself if it holds frames,
/// otherwise each subdirectory that does.
pub fn sequence_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if !frame_files(root)?.is_empty() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(Error::io(root))? {
        let p = entry.map_err(Error::io(root))?.path();
        if p.is_dir() && !frame_files(&p)?.is_empty() {
            dirs.push(p);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Format {
            path: root.to_path_buf(),
            msg: "no frame sequences found".into(),
        });
    }
    Ok(dirs)
}

pub fn frame_name(i: usize) -> String {
    format!("frame_{i:06}.pgm")
}

/// Write a sequence as `dir/frame_%06d.pgm`.
pub fn write_sequence<S: Real>(dir: &Path, seq: &FrameSequence<S>) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    for (i, f) in seq.frames().iter().enumerate() {
        write_pgm(&dir.join(frame_name(i)), &to_gray(seq.height(), seq.width(), f))?;
    }
    Ok(())
}

/// A family of synthetic sequences parsed from
/// `key=value` pairs separated by commas, e.g.
/// `pattern=noise,vy=0,vx=1,frames=30,size=64x64,seed=1,count=16`.
///
/// `pattern=mixed` cycles through all patterns; `count` sequences use seeds
/// `seed, seed + 1, ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFamily {
    pub pattern: Option<Pattern>,
    pub velocity: (f64, f64),
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub count: usize,
}

impl Default for SyntheticFamily {
    fn default() -> Self {
        SyntheticFamily {
            pattern: None,
            velocity: (0.0, 1.0),
            frames: 30,
            height: 64,
            width: 64,
            seed: 0,
            count: 16,
        }
    }
}

impl SyntheticFamily {
    pub fn parse(s: &str) -> Result<Self> {
        let mut f = SyntheticFamily::default();
        let bad = |msg: String| Error::Config(format!("synthetic spec: {msg}"));
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got `{part}`")))?;
            let num = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("bad number `{v}` for {k}")));
            let int = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("bad integer `{v}` for {k}")));
            match k {
                "pattern" if v == "mixed" => f.pattern = None,
                "pattern" => f.pattern = Some(Pattern::parse(v).ok_or_else(|| bad(format!("unknown pattern `{v}`")))?),
                "vy" => f.velocity.0 = num(v)?,
                "vx" => f.velocity.1 = num(v)?,
                "frames" => f.frames = int(v)?,
                "size" => {
                    let (w, h) = v.split_once('x').ok_or_else(|| bad(format!("size must be WxH, got `{v}`")))?;
                    f.width = int(w)?;
                    f.height = int(h)?;
                }
                "seed" => f.seed = int(v)? as u64,
                "count" => f.count = int(v)?,
                _ => return Err(bad(format!("unknown key `{k}`"))),
            }
        }
        Ok(f)
    }

    pub fn specs(&self) -> Vec<SyntheticSpec> {
        (0..self.count)
            .map(|i| SyntheticSpec {
                pattern: self.pattern.unwrap_or(Pattern::ALL[i % Pattern::ALL.len()]),
                velocity: self.velocity,
                frames: self.frames,
                height: self.height,
                width: self.width,
                seed: self.seed + i as u64,
            })
            .collect()
    }

    pub fn generate<S: Real>(&self) -> Result<Vec<FrameSequence<S>>> {
        self.specs()
            .iter()
            .map(|s| generate_synthetic(s).map_err(Error::from))
            .collect()
    }
}

/// Write each generated sequence to `root/seq_%03d/` with a `spec.txt`
/// describing how it was made.
pub fn write_synthetic(root: &Path, family: &SyntheticFamily) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for (i, spec) in family.specs().iter().enumerate() {
        let dir = root.join(format!("seq_{i:03}"));
        let seq = generate_synthetic::<f64>(spec)?;
        write_sequence(&dir, &seq)?;
        let text = format!(
            "generator = \"dfpn synthetic\"\npattern = \"{}\"\nvelocity_y = {}\nvelocity_x = {}\nframes = {}\nheight = {}\nwidth = {}\nseed = {}\n",
            spec.pattern.as_str(),
            spec.velocity.0,
            spec.velocity.1,
            spec.frames,
            spec.height,
            spec.width,
            spec.seed
        );
        let p = dir.join("spec.txt");
        fs::write(&p, text).map_err(Error::io(&p))?;
        dirs.push(dir);
    }
    Ok(dirs)
}
