//! On-disk formats.
//!
//! * image: binary PPM (`P6`, 8-bit)
//! * depth: `"DPTH"`, u32 width, u32 height, f32 row-major
//! * mask: `"MASK"`, u32 width, u32 height, one u8 per pixel
//! * planes: per plane a line `nx ny nz d` followed by a line of run lengths
//!   alternating unset/set, starting with unset
//! * manifest: `split<TAB>image<TAB>depth<TAB>mask<TAB>planes`, paths relative
//!   to the dataset root
//!
//! All multi-byte integers are little-endian.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{generate_sample, DepthSample, Intrinsics, PlaneAnnotation};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "eval" => Some(Split::Eval),
            _ => None,
        }
    }

    /// Scene seed of sample `index`. Train seeds live in the low half of the
    /// 32-bit window `base << 32`, eval seeds in the high half.
    pub fn scene_seed(self, base: u64, index: usize) -> u64 {
        let half = match self {
            Split::Train => 0,
            Split::Eval => 1u64 << 31,
        };
        (base << 32) | (half + index as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: Split,
    pub image: PathBuf,
    pub depth: PathBuf,
    pub mask: PathBuf,
    pub planes: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                e.split.as_str(),
                e.image.display(),
                e.depth.display(),
                e.mask.display(),
                e.planes.display()
            );
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let fields: Vec<&str> = line.split('\t').collect();
            let split = fields.first().and_then(|s| Split::parse(s));
            match (split, fields.len()) {
                (Some(split), 5) => entries.push(ManifestEntry {
                    split,
                    image: fields[1].into(),
                    depth: fields[2].into(),
                    mask: fields[3].into(),
                    planes: fields[4].into(),
                }),
                _ => {
                    return Err(Error::format(
                        path,
                        format!("line {}: expected split and four paths", n + 1),
                    ))
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text, &path)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, width: usize, height: usize, chw: &[f32]) -> Result<()> {
    let n = width * height;
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    for i in 0..n {
        for c in 0..3 {
            bytes.push((chw[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    write_file(path, &bytes)
}

/// Reads a binary PPM into channel-major floats in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = read_file(path)?;
    let bad = |d: &str| Error::format(path, d);
    // Header: magic, width, height, maxval separated by whitespace, then one
    // whitespace byte before the raster.
    let mut fields = Vec::with_capacity(4);
    let mut at = 0;
    while fields.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..at]).map_err(|_| bad("non-ascii header"))?);
    }
    at += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("only 8-bit P6 is supported"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimension"));
    let (w, h) = (parse(fields[1])?, parse(fields[2])?);
    let n = w * h;
    if bytes.len() < at + 3 * n {
        return Err(bad("truncated raster"));
    }
    let mut chw = vec![0.0; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            chw[c * n + i] = bytes[at + 3 * i + c] as f32 / 255.0;
        }
    }
    Ok((w, h, chw))
}

fn raster_header(magic: &[u8; 4], width: usize, height: usize) -> Vec<u8> {
    let mut bytes = magic.to_vec();
    bytes.extend_from_slice(&(width as u32).to_le_bytes());
    bytes.extend_from_slice(&(height as u32).to_le_bytes());
    bytes
}

fn parse_raster_header(bytes: &[u8], magic: &[u8; 4], path: &Path) -> Result<(usize, usize)> {
    if bytes.len() < 12 || &bytes[..4] != magic {
        return Err(Error::format(
            path,
            format!("expected {:?} header", std::str::from_utf8(magic).unwrap_or("?")),
        ));
    }
    let w = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    Ok((w, h))
}

pub fn write_depth(path: &Path, width: usize, height: usize, depth: &[f32]) -> Result<()> {
    let mut bytes = raster_header(b"DPTH", width, height);
    for d in depth {
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    write_file(path, &bytes)
}

pub fn read_depth(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = read_file(path)?;
    let (w, h) = parse_raster_header(&bytes, b"DPTH", path)?;
    let body = &bytes[12..];
    if body.len() != 4 * w * h {
        return Err(Error::format(path, "payload size does not match header"));
    }
    let depth = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((w, h, depth))
}

pub fn write_mask(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    let mut bytes = raster_header(b"MASK", width, height);
    bytes.extend(mask.iter().map(|&m| m as u8));
    write_file(path, &bytes)
}

pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let bytes = read_file(path)?;
    let (w, h) = parse_raster_header(&bytes, b"MASK", path)?;
    let body = &bytes[12..];
    if body.len() != w * h {
        return Err(Error::format(path, "payload size does not match header"));
    }
    Ok((w, h, body.iter().map(|&b| b != 0).collect()))
}

fn run_lengths(mask: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0;
    for &m in mask {
        if m == current {
            len += 1;
        } else {
            runs.push(len);
            current = m;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

pub fn write_planes(path: &Path, planes: &[PlaneAnnotation]) -> Result<()> {
    let mut text = String::new();
    for p in planes {
        let _ = writeln!(text, "{} {} {} {}", p.normal[0], p.normal[1], p.normal[2], p.offset);
        let runs: Vec<String> = run_lengths(&p.mask).iter().map(|r| r.to_string()).collect();
        let _ = writeln!(text, "{}", runs.join(" "));
    }
    write_file(path, text.as_bytes())
}

pub fn read_planes(path: &Path, pixels: usize) -> Result<Vec<PlaneAnnotation>> {
    let text = String::from_utf8(read_file(path)?).map_err(|_| Error::format(path, "not UTF-8"))?;
    let lines: Vec<&str> = text.lines().collect();
    if !lines.len().is_multiple_of(2) {
        return Err(Error::format(path, "plane line without a mask line"));
    }
    let mut planes = Vec::with_capacity(lines.len() / 2);
    for pair in lines.chunks_exact(2) {
        let nums: Vec<f64> = pair[0]
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(path, format!("bad plane line `{}`", pair[0])))?;
        if nums.len() != 4 {
            return Err(Error::format(path, format!("bad plane line `{}`", pair[0])));
        }
        let mut mask = Vec::with_capacity(pixels);
        let mut value = false;
        for run in pair[1].split_whitespace() {
            let run: usize = run
                .parse()
                .map_err(|_| Error::format(path, format!("bad run length `{run}`")))?;
            mask.extend(std::iter::repeat_n(value, run));
            value = !value;
        }
        if mask.len() != pixels {
            return Err(Error::format(
                path,
                format!("mask covers {} pixels, expected {pixels}", mask.len()),
            ));
        }
        planes.push(PlaneAnnotation {
            normal: [nums[0], nums[1], nums[2]],
            offset: nums[3],
            mask,
        });
    }
    Ok(planes)
}

fn entry_for(split: Split, index: usize) -> ManifestEntry {
    let stem = format!("{}/{index:05}", split.as_str());
    ManifestEntry {
        split,
        image: format!("{stem}.ppm").into(),
        depth: format!("{stem}.dpth").into(),
        mask: format!("{stem}.mask").into(),
        planes: format!("{stem}.planes").into(),
    }
}

fn write_sample(root: &Path, entry: &ManifestEntry, sample: &DepthSample) -> Result<()> {
    let (w, h) = (sample.width, sample.height);
    write_ppm(&root.join(&entry.image), w, h, &sample.image)?;
    write_depth(&root.join(&entry.depth), w, h, &sample.depth)?;
    write_mask(&root.join(&entry.mask), w, h, &sample.mask)?;
    write_planes(&root.join(&entry.planes), &sample.planes)
}

/// Render `n_train + n_eval` scenes into `out_dir` and write the manifest.
pub fn make_dataset(n_train: usize, n_eval: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    if n_train == 0 || n_eval == 0 {
        return Err(Error::Data("train and eval counts must be positive".into()));
    }
    for split in [Split::Train, Split::Eval] {
        let dir = out_dir.join(split.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let jobs: Vec<(Split, usize)> = (0..n_train)
        .map(|i| (Split::Train, i))
        .chain((0..n_eval).map(|i| (Split::Eval, i)))
        .collect();
    let entries = jobs
        .par_iter()
        .map(|&(split, i)| {
            let sample = generate_sample(split.scene_seed(seed, i))?;
            let entry = entry_for(split, i);
            write_sample(out_dir, &entry, &sample)?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest { entries };
    let path = out_dir.join(MANIFEST_FILE);
    write_file(&path, manifest.to_text().as_bytes())?;
    Ok(manifest)
}

/// Load every sample listed in `dir`'s manifest, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<(Split, DepthSample)>> {
    let manifest = Manifest::load(dir)?;
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let (w, h, image) = read_ppm(&dir.join(&e.image))?;
            let (dw, dh, depth) = read_depth(&dir.join(&e.depth))?;
            let (mw, mh, mask) = read_mask(&dir.join(&e.mask))?;
            if (w, h) != (dw, dh) || (w, h) != (mw, mh) {
                return Err(Error::Data(format!(
                    "{}: image, depth and mask sizes disagree",
                    e.image.display()
                )));
            }
            let planes = read_planes(&dir.join(&e.planes), w * h)?;
            let sample = DepthSample {
                width: w,
                height: h,
                image,
                depth,
                mask,
                intrinsics: Intrinsics::default(),
                planes,
            };
            Ok((e.split, sample))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn seed_ranges_are_disjoint() {
        let train: HashSet<u64> = (0..5000).map(|i| Split::Train.scene_seed(7, i)).collect();
        let eval: HashSet<u64> = (0..5000).map(|i| Split::Eval.scene_seed(7, i)).collect();
        assert!(train.is_disjoint(&eval));
        assert_eq!(train.len(), 5000);
    }

    #[test]
    fn manifest_rejects_malformed_lines() {
        let p = Path::new("m");
        assert!(Manifest::parse("train\ta\tb\tc\n", p).is_err());
        assert!(Manifest::parse("test\ta\tb\tc\td\n", p).is_err());
        assert_eq!(Manifest::parse("eval\ta\tb\tc\td\n", p).unwrap().entries.len(), 1);
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = make_dataset(3, 2, 5, dir.path()).unwrap();
        assert_eq!(manifest.entries.len(), 5);
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(text.lines().count(), 5);

        let loaded = load_dataset(dir.path()).unwrap();
        let fresh = generate_sample(Split::Train.scene_seed(5, 1)).unwrap();
        let (split, back) = &loaded[1];
        assert_eq!(*split, Split::Train);
        assert_eq!(back.depth, fresh.depth);
        assert_eq!(back.mask, fresh.mask);
        assert_eq!(back.planes, fresh.planes);
        for (a, b) in back.image.iter().zip(&fresh.image) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        back.validate().unwrap();
    }

    #[test]
    fn unwritable_directory_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        assert!(matches!(
            make_dataset(1, 1, 0, &blocker.join("sub")),
            Err(Error::Io { .. })
        ));
    }

    proptest! {
        #[test]
        fn run_length_round_trip(mask in prop::collection::vec(any::<bool>(), 1..200)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.planes");
            let plane = PlaneAnnotation { normal: [0.0, -0.6, -0.8], offset: 1.25, mask: mask.clone() };
            write_planes(&path, std::slice::from_ref(&plane)).unwrap();
            let back = read_planes(&path, mask.len()).unwrap();
            prop_assert_eq!(back, vec![plane]);
        }
    }
}
