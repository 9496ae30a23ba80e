//! Dataset manifest, 8-bit PGM/PPM image I/O, min-max normalization of the
//! continuous targets and leave-GMs-out split construction.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{
    ArchitectureTargets, LossTargets, CONTINUOUS_NAMES, DISCRETE_NAMES, FINE_NAMES, NUM_CONTINUOUS, NUM_DISCRETE,
    NUM_FINE,
};
use crate::rng::rng_for;
use crate::tensor::Tensor;
use crate::zoo::{ContentFamily, GmSpec};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmEntry {
    pub id: String,
    pub family: ContentFamily,
    pub architecture: ArchitectureTargets,
    pub losses: LossTargets,
    /// Image paths relative to the manifest's directory.
    pub images: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<GmSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// `[C, H, W]`.
    pub image_shape: [usize; 3],
    pub seed: u64,
    pub gms: Vec<GmEntry>,
}

impl Manifest {
    pub fn gm(&self, id: &str) -> Result<&GmEntry> {
        self.gms
            .iter()
            .find(|g| g.id == id)
            .ok_or_else(|| Error::invalid(format!("unknown GM {id}")))
    }
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, manifest)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Read and validate: version, non-empty GM list, every image present and of
/// the declared shape.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let m: Manifest = serde_json::from_slice(&fs::read(path)?)?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Format(format!("manifest version {} (expected {MANIFEST_VERSION})", m.version)));
    }
    if m.gms.is_empty() {
        return Err(Error::Format("manifest lists no GMs".into()));
    }
    let root = path.parent().unwrap_or(Path::new("."));
    for gm in &m.gms {
        gm.architecture.validate()?;
        gm.losses.validate()?;
        for rel in &gm.images {
            let p = root.join(rel);
            if !p.exists() {
                return Err(Error::MissingFile(p));
            }
            let (shape, _) = read_pnm(&p)?;
            if shape != m.image_shape {
                return Err(Error::shape(
                    p.display().to_string(),
                    format!("image is {shape:?}, manifest declares {:?}", m.image_shape),
                ));
            }
        }
    }
    Ok(m)
}

/// Load one GM's images as `[n, C, H, W]` in [-1, 1].
pub fn load_gm_images(manifest_path: &Path, manifest: &Manifest, gm: &GmEntry, limit: Option<usize>) -> Result<Tensor<f32>> {
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let n = limit.map_or(gm.images.len(), |l| l.min(gm.images.len()));
    let [c, h, w] = manifest.image_shape;
    let mut data = Vec::with_capacity(n * c * h * w);
    for rel in &gm.images[..n] {
        let (_, bytes) = read_pnm(&root.join(rel))?;
        data.extend(chw_from_interleaved(&bytes, manifest.image_shape).into_iter().map(byte_to_unit));
    }
    Tensor::new(vec![n, c, h, w], data)
}

pub fn unit_to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn byte_to_unit(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

fn chw_from_interleaved(bytes: &[u8], [c, h, w]: [usize; 3]) -> Vec<u8> {
    let mut out = vec![0; c * h * w];
    for i in 0..h * w {
        for ch in 0..c {
            out[ch * h * w + i] = bytes[i * c + ch];
        }
    }
    out
}

/// One PGM/PPM image as `[C, H, W]` in [-1, 1].
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let (shape, bytes) = read_pnm(path)?;
    Tensor::new(shape.to_vec(), chw_from_interleaved(&bytes, shape).into_iter().map(byte_to_unit).collect())
}

/// Write an 8-bit binary PGM (C=1) or PPM (C=3) from channel-major bytes.
pub fn write_pnm(path: &Path, shape: [usize; 3], chw: &[u8]) -> Result<()> {
    let [c, h, w] = shape;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::invalid(format!("PNM supports 1 or 3 channels, got {c}"))),
    };
    if chw.len() != c * h * w {
        return Err(Error::shape("write_pnm", format!("{} bytes for {shape:?}", chw.len())));
    }
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    for i in 0..h * w {
        for ch in 0..c {
            out.push(chw[ch * h * w + i]);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Write a `[C, H, W]` float image in [-1, 1].
pub fn write_image(path: &Path, shape: [usize; 3], values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().map(|&v| unit_to_byte(v)).collect();
    write_pnm(path, shape, &bytes)
}

/// Write a single-channel map rescaled from its own min/max to 0..255.
pub fn write_normalized_pgm(path: &Path, h: usize, w: usize, values: &[f64]) -> Result<()> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let bytes: Vec<u8> = values.iter().map(|v| ((v - lo) / span * 255.0).round() as u8).collect();
    write_pnm(path, [1, h, w], &bytes)
}

/// Read a binary PGM/PPM with maxval 255. Returns `([C, H, W], interleaved bytes)`.
pub fn read_pnm(path: &Path) -> Result<([usize; 3], Vec<u8>)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1; // single whitespace byte before the raster
    let c = match tokens[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(bad(&format!("unsupported magic {other}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    let n = c * h * w;
    if bytes.len() < pos + n {
        return Err(bad("truncated raster"));
    }
    Ok(([c, h, w], bytes[pos..pos + n].to_vec()))
}

/// Per-parameter min/max over training GMs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub min: [f64; NUM_CONTINUOUS],
    pub max: [f64; NUM_CONTINUOUS],
}

impl NormalizationStats {
    pub fn from_targets<'a>(targets: impl IntoIterator<Item = &'a ArchitectureTargets>) -> Result<Self> {
        let mut min = [f64::INFINITY; NUM_CONTINUOUS];
        let mut max = [f64::NEG_INFINITY; NUM_CONTINUOUS];
        for t in targets {
            for j in 0..NUM_CONTINUOUS {
                min[j] = min[j].min(t.continuous_raw[j]);
                max[j] = max[j].max(t.continuous_raw[j]);
            }
        }
        let stats = NormalizationStats { min, max };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        for j in 0..NUM_CONTINUOUS {
            // also rejects NaN bounds
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(self.max[j] > self.min[j]) {
                return Err(Error::invalid(format!(
                    "{} has no spread in the training split (min {} max {})",
                    CONTINUOUS_NAMES[j], self.min[j], self.max[j]
                )));
            }
        }
        Ok(())
    }

    /// `(x - min) / (max - min)`, clamped to [0, 1].
    pub fn normalize(&self, raw: &[f64; NUM_CONTINUOUS]) -> [f64; NUM_CONTINUOUS] {
        std::array::from_fn(|j| ((raw[j] - self.min[j]) / (self.max[j] - self.min[j])).clamp(0.0, 1.0))
    }

    /// Unclamped inverse.
    pub fn denormalize(&self, norm: &[f64; NUM_CONTINUOUS]) -> [f64; NUM_CONTINUOUS] {
        std::array::from_fn(|j| self.min[j] + norm[j] * (self.max[j] - self.min[j]))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub test: Vec<String>,
    pub train: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub folds: Vec<Fold>,
    pub seed: u64,
    /// Each test set holds the same number of GMs from every content family.
    pub balanced_families: Vec<ContentFamily>,
}

const SPLIT_ATTEMPTS: usize = 20_000;

/// Leave-GMs-out folds with family-balanced test sets. Training splits must
/// keep every discrete class and fine-flag value seen in the manifest, and a
/// spread in every continuous parameter.
pub fn make_splits(manifest: &Manifest, folds: usize, test_size: usize, seed: u64) -> Result<SplitPlan> {
    let n = manifest.gms.len();
    if test_size < 2 || folds == 0 || folds * test_size > n {
        return Err(Error::invalid(format!(
            "{folds} folds x {test_size} test GMs do not fit {n} GMs (test size >= 2)"
        )));
    }
    let families: Vec<ContentFamily> = manifest
        .gms
        .iter()
        .map(|g| g.family)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if !test_size.is_multiple_of(families.len()) {
        return Err(Error::invalid(format!(
            "test size {test_size} cannot be balanced over {} families",
            families.len()
        )));
    }
    let per_family = test_size / families.len();
    let mut by_family: Vec<Vec<&GmEntry>> = families
        .iter()
        .map(|f| manifest.gms.iter().filter(|g| g.family == *f).collect())
        .collect();
    if by_family.iter().any(|v| v.len() < folds * per_family) {
        return Err(Error::invalid("too few GMs per family for family-balanced test sets"));
    }
    let mut rng = rng_for(seed, "splits");
    for _ in 0..SPLIT_ATTEMPTS {
        for v in &mut by_family {
            v.shuffle(&mut rng);
        }
        let plan: Vec<Fold> = (0..folds)
            .map(|k| {
                let test: Vec<String> = by_family
                    .iter()
                    .flat_map(|v| v[k * per_family..(k + 1) * per_family].iter().map(|g| g.id.clone()))
                    .collect();
                let train = manifest
                    .gms
                    .iter()
                    .filter(|g| !test.contains(&g.id))
                    .map(|g| g.id.clone())
                    .collect();
                Fold { test, train }
            })
            .collect();
        if plan.iter().all(|f| training_gaps(manifest, &f.train).is_empty()) {
            return Ok(SplitPlan {
                folds: plan,
                seed,
                balanced_families: families,
            });
        }
    }
    Err(Error::Coverage(format!(
        "no family-balanced {folds}x{test_size} split keeps every class in training; redesign the zoo"
    )))
}

/// Classes (present in the manifest) missing from a training split.
pub fn training_gaps(manifest: &Manifest, train: &[String]) -> Vec<String> {
    let train: Vec<&GmEntry> = manifest.gms.iter().filter(|g| train.contains(&g.id)).collect();
    let mut gaps = Vec::new();
    for k in 0..NUM_DISCRETE {
        let all: BTreeSet<usize> = manifest.gms.iter().map(|g| g.architecture.discrete[k]).collect();
        let seen: BTreeSet<usize> = train.iter().map(|g| g.architecture.discrete[k]).collect();
        gaps.extend(all.difference(&seen).map(|c| format!("{}={c}", DISCRETE_NAMES[k])));
    }
    for m in 0..NUM_FINE {
        let all: BTreeSet<bool> = manifest.gms.iter().map(|g| g.losses.fine[m]).collect();
        let seen: BTreeSet<bool> = train.iter().map(|g| g.losses.fine[m]).collect();
        gaps.extend(all.difference(&seen).map(|v| format!("{}={v}", FINE_NAMES[m])));
    }
    for m in 0..crate::labels::NUM_COARSE {
        let all: BTreeSet<bool> = manifest.gms.iter().map(|g| g.losses.coarse[m]).collect();
        let seen: BTreeSet<bool> = train.iter().map(|g| g.losses.coarse[m]).collect();
        gaps.extend(all.difference(&seen).map(|v| format!("coarse{m}={v}")));
    }
    if NormalizationStats::from_targets(train.iter().map(|g| &g.architecture)).is_err() {
        gaps.push("continuous spread".into());
    }
    gaps
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{ground_truth_vector, ZooConfig};

    pub(crate) fn zoo_manifest() -> Manifest {
        let gms = ZooConfig::default()
            .specs
            .iter()
            .map(|s| {
                let (architecture, losses) = ground_truth_vector(s).unwrap();
                GmEntry {
                    id: s.id.clone(),
                    family: s.family,
                    architecture,
                    losses,
                    images: vec![],
                    checkpoint: None,
                    spec: None,
                }
            })
            .collect();
        Manifest {
            version: MANIFEST_VERSION,
            image_shape: [1, 16, 16],
            seed: 1,
            gms,
        }
    }

    #[test]
    fn range_example_and_round_trip() {
        let mut lo = ArchitectureTargets {
            continuous_raw: [1.0; 9],
            discrete: [0; 6],
        };
        let mut hi = lo.clone();
        lo.continuous_raw[0] = 5.0;
        hi.continuous_raw[0] = 95.0;
        hi.continuous_raw[1..].iter_mut().for_each(|v| *v = 2.0);
        let stats = NormalizationStats::from_targets([&lo, &hi]).unwrap();
        let mut x = [1.5; 9];
        x[0] = 50.0;
        assert!((stats.normalize(&x)[0] - 0.5).abs() < 1e-12);
        assert_eq!(stats.normalize(&lo.continuous_raw)[0], 0.0);
        let back = stats.denormalize(&stats.normalize(&x));
        assert!(back.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-9));
        assert!(NormalizationStats::from_targets([&lo, &lo]).is_err());
    }

    #[test]
    fn default_splits() {
        let m = zoo_manifest();
        let plan = make_splits(&m, 6, 2, 7).unwrap();
        let mut tested: Vec<&String> = plan.folds.iter().flat_map(|f| &f.test).collect();
        tested.sort();
        tested.dedup();
        assert_eq!(tested.len(), 12);
        for f in &plan.folds {
            assert!(f.test.iter().all(|t| !f.train.contains(t)));
            let fams: BTreeSet<_> = f.test.iter().map(|t| m.gm(t).unwrap().family).collect();
            assert_eq!(fams.len(), 2);
        }
        assert_eq!(plan, make_splits(&m, 6, 2, 7).unwrap());
        assert!(make_splits(&m, 7, 2, 7).is_err());
    }

    #[test]
    fn stats_ignore_test_gms() {
        let mut m = zoo_manifest();
        let fold = &make_splits(&m, 6, 2, 3).unwrap().folds[0];
        let stats = |m: &Manifest| {
            NormalizationStats::from_targets(
                m.gms.iter().filter(|g| fold.train.contains(&g.id)).map(|g| &g.architecture),
            )
            .unwrap()
        };
        let before = stats(&m);
        for g in m.gms.iter_mut().filter(|g| fold.test.contains(&g.id)) {
            g.architecture.continuous_raw = [1e6; 9];
        }
        assert_eq!(before, stats(&m));
    }

    #[test]
    fn pnm_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        for c in [1, 3] {
            let shape = [c, 5, 7];
            let bytes: Vec<u8> = (0..c * 35).map(|i| (i * 37 % 256) as u8).collect();
            let p = dir.path().join(format!("x{c}.pnm"));
            write_pnm(&p, shape, &bytes).unwrap();
            let (s, inter) = read_pnm(&p).unwrap();
            assert_eq!(s, shape);
            assert_eq!(chw_from_interleaved(&inter, shape), bytes);
        }
        assert!(matches!(read_pnm(&dir.path().join("nope.pgm")), Err(Error::MissingFile(_))));
        for b in 0..=255u8 {
            assert_eq!(unit_to_byte(byte_to_unit(b)), b);
        }
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = zoo_manifest();
        let img = PathBuf::from("a.pgm");
        write_pnm(&dir.path().join(&img), [1, 16, 16], &[7; 256]).unwrap();
        m.gms[0].images = vec![img];
        let path = dir.path().join("manifest.json");
        write_manifest(&path, &m).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), m);

        m.gms[1].images = vec![PathBuf::from("missing.pgm")];
        write_manifest(&path, &m).unwrap();
        match read_manifest(&path) {
            Err(Error::MissingFile(p)) => assert!(p.ends_with("missing.pgm")),
            other => panic!("{other:?}"),
        }
        m.gms.clear();
        write_manifest(&path, &m).unwrap();
        assert!(read_manifest(&path).is_err());
    }
}
