//! Frozen feature extractors mapping a 224×224 state raster to a fixed-length embedding.
//!
//! Built-ins: `raw28` (bilinear thumbnail), `hog` (gradient histograms),
//! `randconv` (one frozen random convolution layer). Anything heavier plugs
//! in through `external` (a child process speaking a line protocol) or
//! `vecdir` (precomputed vectors keyed by the crop's content hash).

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::imaging::{encode_png, resize_bilinear, GrayImage};
use crate::{Error, Result, STATE_SIZE};

/// Environment variable naming the external embedding provider command.
pub const PROVIDER_ENV: &str = "DEFECTLOC_EMBED_CMD";

pub const BUILTIN_NAMES: [&str; 5] = ["raw28", "hog", "randconv", "external", "vecdir"];

/// A frozen, deterministic embedding of a 224×224 raster.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;

    /// Output length; constant for the extractor's lifetime.
    fn dim(&self) -> usize;

    fn extract(&self, img: &GrayImage) -> Result<Vec<f32>>;

    /// Provenance recorded alongside run outputs.
    fn metadata(&self) -> Value {
        json!({ "name": self.name(), "dim": self.dim() })
    }
}

fn check_input(img: &GrayImage) -> Result<()> {
    if img.width() != STATE_SIZE || img.height() != STATE_SIZE {
        return Err(Error::Contract(format!(
            "extractor input must be {STATE_SIZE}x{STATE_SIZE}, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    Ok(())
}

/// Name plus free-form parameters, as stored in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub params: Map<String, Value>,
}

impl ExtractorSpec {
    pub fn named(name: &str) -> Self {
        ExtractorSpec {
            name: name.to_string(),
            params: Map::new(),
        }
    }

    pub fn build(&self) -> Result<Arc<dyn FeatureExtractor>> {
        registry_lookup(&self.name, &self.params)
    }
}

/// Resolves an extractor by name.
pub fn registry_lookup(name: &str, params: &Map<String, Value>) -> Result<Arc<dyn FeatureExtractor>> {
    let allowed: &[&str] = match name {
        "raw28" | "hog" => &[],
        "randconv" => &["seed"],
        "external" => &["command", "args"],
        "vecdir" => &["dir", "dim"],
        _ => {
            return Err(Error::UnknownExtractor {
                name: name.to_string(),
                available: BUILTIN_NAMES.join(", "),
            })
        }
    };
    if let Some(k) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(Error::Config(format!(
            "extractor `{name}` does not take parameter `{k}`"
        )));
    }
    Ok(match name {
        "raw28" => Arc::new(RawDownsample::new(28)),
        "hog" => Arc::new(GradientHistogram::default()),
        "randconv" => {
            let seed = match params.get("seed") {
                None => 0,
                Some(v) => v.as_u64().ok_or_else(|| {
                    Error::Config(format!("randconv seed must be a non-negative integer, got {v}"))
                })?,
            };
            Arc::new(RandomConv::new(seed))
        }
        "external" => {
            let command = match params.get("command") {
                Some(Value::String(s)) => s.clone(),
                Some(v) => return Err(Error::Config(format!("external command must be a string, got {v}"))),
                None => std::env::var(PROVIDER_ENV).map_err(|_| {
                    Error::Config(format!(
                        "external extractor needs a `command` parameter or {PROVIDER_ENV}"
                    ))
                })?,
            };
            let args = match params.get("args") {
                None => vec![],
                Some(Value::Array(a)) => a
                    .iter()
                    .map(|v| {
                        v.as_str().map(str::to_string).ok_or_else(|| {
                            Error::Config("external args must be strings".into())
                        })
                    })
                    .collect::<Result<_>>()?,
                Some(v) => return Err(Error::Config(format!("external args must be a list, got {v}"))),
            };
            Arc::new(ExternalProvider::spawn(&command, &args)?)
        }
        "vecdir" => {
            let dir = params
                .get("dir")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::Config("vecdir needs a `dir` string parameter".into()))?;
            let dim = params
                .get("dim")
                .and_then(Value::as_u64)
                .filter(|d| *d > 0)
                .ok_or_else(|| Error::Config("vecdir needs a positive integer `dim`".into()))?;
            Arc::new(PrecomputedVectors::new(dir, dim as usize))
        }
        _ => unreachable!(),
    })
}

/// Bilinear thumbnail flattened row-major.
#[derive(Debug, Clone)]
pub struct RawDownsample {
    side: usize,
    name: String,
}

impl RawDownsample {
    pub fn new(side: usize) -> Self {
        RawDownsample {
            side,
            name: format!("raw{side}"),
        }
    }
}

impl FeatureExtractor for RawDownsample {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.side * self.side
    }

    fn extract(&self, img: &GrayImage) -> Result<Vec<f32>> {
        check_input(img)?;
        Ok(resize_bilinear(img, self.side, self.side)?.data().to_vec())
    }
}

/// Histogram of oriented gradients.
///
/// Central-difference gradients (edge pixels replicate their neighbour),
/// unsigned orientation histograms per cell with linear bin interpolation,
/// L2-normalized overlapping blocks of 2×2 cells with stride one cell.
#[derive(Debug, Clone)]
pub struct GradientHistogram {
    cell: usize,
    bins: usize,
    block: usize,
}

impl Default for GradientHistogram {
    fn default() -> Self {
        GradientHistogram {
            cell: 16,
            bins: 9,
            block: 2,
        }
    }
}

const HOG_EPS: f32 = 1e-3;

/// Orientation of (gx, gy) folded into [0, π).
fn unsigned_angle(gx: f32, gy: f32) -> f32 {
    use std::f32::consts::{FRAC_PI_2, PI};
    let (ax, ay) = (gx.abs(), gy.abs());
    let a = if ax >= ay {
        atan_unit(ay / ax)
    } else {
        FRAC_PI_2 - atan_unit(ax / ay)
    };
    // `a` is the angle in the first quadrant; mirror for opposite-sign components
    let t = if (gx >= 0.0) == (gy >= 0.0) { a } else { PI - a };
    if t >= PI {
        0.0
    } else {
        t
    }
}

/// arctan on [0, 1]; polynomial with absolute error below 2e-8.
fn atan_unit(z: f32) -> f32 {
    const C: [f32; 8] = [
        -0.333_331_45,
        0.199_935_51,
        -0.142_088_99,
        0.106_562_64,
        -0.075_289_64,
        0.042_909_61,
        -0.016_165_737,
        0.002_866_225_7,
    ];
    let z2 = z * z;
    let mut p = C[7];
    for c in C[..7].iter().rev() {
        p = p * z2 + c;
    }
    z * (1.0 + p * z2)
}

impl GradientHistogram {
    fn cells_per_side(&self) -> usize {
        STATE_SIZE / self.cell
    }

    fn blocks_per_side(&self) -> usize {
        self.cells_per_side() - self.block + 1
    }

    fn cell_histograms(&self, img: &GrayImage) -> Vec<f32> {
        let n = STATE_SIZE;
        let cells = self.cells_per_side();
        let bins = self.bins;
        let d = img.data();
        let inv_bin_width = bins as f32 / std::f32::consts::PI;
        let cell_of: Vec<usize> = (0..n).map(|x| (x / self.cell).min(cells - 1)).collect();
        let mut hist = vec![0f32; cells * cells * bins];
        for y in 0..n {
            let (ym, yp) = (y.saturating_sub(1), (y + 1).min(n - 1));
            let row_base = cell_of[y] * cells;
            let (above, row, below) = (&d[ym * n..][..n], &d[y * n..][..n], &d[yp * n..][..n]);
            for x in 0..n {
                let (xm, xp) = (x.saturating_sub(1), (x + 1).min(n - 1));
                let gx = row[xp] - row[xm];
                let gy = below[x] - above[x];
                let mag = (gx * gx + gy * gy).sqrt();
                if mag == 0.0 {
                    continue;
                }
                // bin centers sit at (b + 0.5)·bin_width
                let pos = unsigned_angle(gx, gy) * inv_bin_width - 0.5;
                let lo = pos.floor();
                let frac = pos - lo;
                let b0 = if lo < 0.0 { bins - 1 } else { (lo as usize).min(bins - 1) };
                let b1 = if b0 + 1 == bins { 0 } else { b0 + 1 };
                let h = &mut hist[(row_base + cell_of[x]) * bins..][..bins];
                h[b0] += mag * (1.0 - frac);
                h[b1] += mag * frac;
            }
        }
        hist
    }
}

impl FeatureExtractor for GradientHistogram {
    fn name(&self) -> &str {
        "hog"
    }

    fn dim(&self) -> usize {
        let b = self.blocks_per_side();
        b * b * self.block * self.block * self.bins
    }

    fn extract(&self, img: &GrayImage) -> Result<Vec<f32>> {
        check_input(img)?;
        let hist = self.cell_histograms(img);
        let cells = self.cells_per_side();
        let blocks = self.blocks_per_side();
        let mut out = Vec::with_capacity(self.dim());
        for by in 0..blocks {
            for bx in 0..blocks {
                let start = out.len();
                for cy in by..by + self.block {
                    for cx in bx..bx + self.block {
                        out.extend_from_slice(&hist[(cy * cells + cx) * self.bins..][..self.bins]);
                    }
                }
                let block = &mut out[start..];
                let norm = (block.iter().map(|v| v * v).sum::<f32>() + HOG_EPS * HOG_EPS).sqrt();
                block.iter_mut().for_each(|v| *v /= norm);
            }
        }
        Ok(out)
    }
}

/// One frozen random convolution layer with ReLU and 4×4 grid average pooling.
#[derive(Debug, Clone)]
pub struct RandomConv {
    seed: u64,
    /// `FILTERS × KERNEL²`, row-major.
    weights: Vec<f32>,
}

impl RandomConv {
    pub const FILTERS: usize = 32;
    pub const KERNEL: usize = 7;
    pub const STRIDE: usize = 4;
    pub const GRID: usize = 4;
    pub const WEIGHT_STD: f64 = 0.1;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, Self::WEIGHT_STD).expect("valid std");
        let weights = (0..Self::FILTERS * Self::KERNEL * Self::KERNEL)
            .map(|_| normal.sample(&mut rng) as f32)
            .collect();
        RandomConv { seed, weights }
    }

    fn out_side() -> usize {
        (STATE_SIZE - Self::KERNEL) / Self::STRIDE + 1
    }
}

impl FeatureExtractor for RandomConv {
    fn name(&self) -> &str {
        "randconv"
    }

    fn dim(&self) -> usize {
        Self::FILTERS * Self::GRID * Self::GRID
    }

    fn extract(&self, img: &GrayImage) -> Result<Vec<f32>> {
        check_input(img)?;
        let (k, s, side) = (Self::KERNEL, Self::STRIDE, Self::out_side());
        let kk = k * k;
        let positions = side * side;
        let d = img.data();
        let mut patches = vec![0f32; positions * kk];
        for oy in 0..side {
            for ox in 0..side {
                let row = &mut patches[(oy * side + ox) * kk..][..kk];
                for dy in 0..k {
                    let src = (oy * s + dy) * STATE_SIZE + ox * s;
                    row[dy * k..(dy + 1) * k].copy_from_slice(&d[src..src + k]);
                }
            }
        }
        let f = Self::FILTERS;
        let mut maps = vec![0f32; positions * f];
        // maps (positions × f) = patches (positions × kk) · weightsᵀ (kk × f)
        unsafe {
            matrixmultiply::sgemm(
                positions,
                kk,
                f,
                1.0,
                patches.as_ptr(),
                kk as isize,
                1,
                self.weights.as_ptr(),
                1,
                kk as isize,
                0.0,
                maps.as_mut_ptr(),
                f as isize,
                1,
            );
        }
        let g = Self::GRID;
        let edges: Vec<usize> = (0..=g).map(|i| i * side / g).collect();
        let mut out = vec![0f32; self.dim()];
        for gy in 0..g {
            for gx in 0..g {
                let count = ((edges[gy + 1] - edges[gy]) * (edges[gx + 1] - edges[gx])) as f32;
                for y in edges[gy]..edges[gy + 1] {
                    for x in edges[gx]..edges[gx + 1] {
                        let m = &maps[(y * side + x) * f..][..f];
                        for (c, &v) in m.iter().enumerate() {
                            out[c * g * g + gy * g + gx] += v.max(0.0);
                        }
                    }
                }
                for c in 0..f {
                    out[c * g * g + gy * g + gx] /= count;
                }
            }
        }
        Ok(out)
    }

    fn metadata(&self) -> Value {
        json!({ "name": "randconv", "dim": self.dim(), "seed": self.seed })
    }
}

/// SHA-256 (hex) of the 8-bit PNG encoding of `img`; keys precomputed vectors.
pub fn content_hash(img: &GrayImage) -> String {
    let digest = Sha256::digest(encode_png(img));
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

fn parse_vector(line: &str, dim: usize, origin: &str) -> Result<Vec<f32>> {
    let v: Vec<f32> = line
        .split_whitespace()
        .map(|t| {
            t.parse::<f32>()
                .map_err(|_| Error::Provider(format!("{origin}: `{t}` is not a number")))
        })
        .collect::<Result<_>>()?;
    if v.len() != dim {
        return Err(Error::Provider(format!(
            "{origin}: expected {dim} values, got {}",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Provider(format!("{origin}: non-finite value")));
    }
    Ok(v)
}

/// Reads `<content-hash>.vec` files from a directory.
#[derive(Debug, Clone)]
pub struct PrecomputedVectors {
    dir: PathBuf,
    dim: usize,
}

impl PrecomputedVectors {
    pub fn new(dir: impl Into<PathBuf>, dim: usize) -> Self {
        PrecomputedVectors {
            dir: dir.into(),
            dim,
        }
    }

    pub fn path_for(&self, img: &GrayImage) -> PathBuf {
        self.dir.join(format!("{}.vec", content_hash(img)))
    }
}

impl FeatureExtractor for PrecomputedVectors {
    fn name(&self) -> &str {
        "vecdir"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, img: &GrayImage) -> Result<Vec<f32>> {
        check_input(img)?;
        let path = self.path_for(img);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        parse_vector(text.trim(), self.dim, &path.display().to_string())
    }

    fn metadata(&self) -> Value {
        json!({ "name": "vecdir", "dim": self.dim, "dir": self.dir })
    }
}

struct ProviderIo {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// Child process speaking the embedding protocol:
/// `DIM <n>` handshake, `EMBED <png path>` requests answered by one line of
/// `n` floats, `QUIT` on shutdown. Requests are serialized through a mutex.
pub struct ExternalProvider {
    command: String,
    args: Vec<String>,
    dim: usize,
    io: Mutex<ProviderIo>,
    scratch: PathBuf,
    counter: AtomicU64,
}

static SCRATCH_ID: AtomicU64 = AtomicU64::new(0);

impl ExternalProvider {
    pub fn spawn(command: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(command)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Provider(format!("cannot start `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let mut stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut line = String::new();
        stdout
            .read_line(&mut line)
            .map_err(|e| Error::Provider(format!("`{command}` handshake: {e}")))?;
        let dim = line
            .trim()
            .strip_prefix("DIM ")
            .and_then(|n| n.trim().parse::<usize>().ok())
            .filter(|d| *d > 0)
            .ok_or_else(|| {
                Error::Provider(format!(
                    "`{command}` handshake must be `DIM <n>`, got {:?}",
                    line.trim()
                ))
            })?;
        let scratch = std::env::temp_dir().join(format!(
            "defectloc-embed-{}-{}",
            std::process::id(),
            SCRATCH_ID.fetch_add(1, Ordering::Relaxed)
        ));
        fs::create_dir_all(&scratch).map_err(|e| Error::io(&scratch, e))?;
        Ok(ExternalProvider {
            command: command.to_string(),
            args: args.to_vec(),
            dim,
            io: Mutex::new(ProviderIo {
                child,
                stdin,
                stdout,
            }),
            scratch,
            counter: AtomicU64::new(0),
        })
    }

    fn request(&self, png_path: &Path) -> Result<Vec<f32>> {
        let mut io = self.io.lock().unwrap_or_else(|p| p.into_inner());
        let broken = |e: std::io::Error| Error::Provider(format!("`{}`: {e}", self.command));
        writeln!(io.stdin, "EMBED {}", png_path.display()).map_err(broken)?;
        io.stdin.flush().map_err(broken)?;
        let mut line = String::new();
        let n = io.stdout.read_line(&mut line).map_err(broken)?;
        if n == 0 {
            return Err(Error::Provider(format!(
                "`{}` closed its output",
                self.command
            )));
        }
        parse_vector(line.trim(), self.dim, &self.command)
    }
}

impl FeatureExtractor for ExternalProvider {
    fn name(&self) -> &str {
        "external"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, img: &GrayImage) -> Result<Vec<f32>> {
        check_input(img)?;
        let id = self.counter.fetch_add(1, Ordering::Relaxed);
        let path = self.scratch.join(format!("state_{id}.png"));
        fs::write(&path, encode_png(img)).map_err(|e| Error::io(&path, e))?;
        let out = self.request(&path);
        let _ = fs::remove_file(&path);
        out
    }

    fn metadata(&self) -> Value {
        json!({
            "name": "external",
            "dim": self.dim,
            "command": self.command,
            "args": self.args,
        })
    }
}

impl Drop for ExternalProvider {
    fn drop(&mut self) {
        if let Ok(io) = self.io.get_mut() {
            let _ = writeln!(io.stdin, "QUIT");
            let _ = io.stdin.flush();
            let _ = io.child.wait();
        }
        let _ = fs::remove_dir_all(&self.scratch);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unsigned_angle_matches_atan2() {
        let mut max_err = 0f32;
        for i in 0..2000 {
            let phi = i as f32 * 0.00314159 * 2.0;
            let (gx, gy) = (phi.cos() * 0.3, phi.sin() * 0.3);
            let mut want = gy.atan2(gx);
            if want < 0.0 {
                want += std::f32::consts::PI;
            }
            let got = unsigned_angle(gx, gy);
            let d = (got - want).abs();
            max_err = max_err.max(d.min(std::f32::consts::PI - d));
            assert!((0.0..std::f32::consts::PI).contains(&got));
        }
        assert!(max_err < 1e-5, "{max_err}");
        assert_eq!(unsigned_angle(1.0, 0.0), 0.0);
        assert_eq!(unsigned_angle(-1.0, 0.0), 0.0);
    }
    use proptest::prelude::*;
    use rand::Rng;

    fn random_state(seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::from_fn(STATE_SIZE, STATE_SIZE, |_, _| rng.random::<f32>())
    }

    fn lookup(name: &str) -> Arc<dyn FeatureExtractor> {
        registry_lookup(name, &Map::new()).unwrap()
    }

    #[test]
    fn registry_dims() {
        assert_eq!(lookup("raw28").dim(), 784);
        // 13·13 blocks · 4 cells · 9 bins
        assert_eq!(lookup("hog").dim(), 13 * 13 * 4 * 9);
        assert_eq!(lookup("hog").dim(), 6084);
        assert_eq!(lookup("randconv").dim(), 512);
    }

    #[test]
    fn unknown_name_lists_options() {
        let err = registry_lookup("nope", &Map::new()).err().unwrap();
        let msg = err.to_string();
        for n in BUILTIN_NAMES {
            assert!(msg.contains(n), "{msg}");
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = Map::new();
        p.insert("seed".into(), json!("x"));
        assert!(matches!(registry_lookup("randconv", &p), Err(Error::Config(_))));
        let mut p = Map::new();
        p.insert("bogus".into(), json!(1));
        assert!(matches!(registry_lookup("hog", &p), Err(Error::Config(_))));
        assert!(matches!(registry_lookup("vecdir", &Map::new()), Err(Error::Config(_))));
    }

    #[test]
    fn raw_of_constant_is_constant() {
        let v = lookup("raw28").extract(&GrayImage::filled(224, 224, 0.5)).unwrap();
        assert_eq!(v.len(), 784);
        assert!(v.iter().all(|&x| (x - 0.5).abs() < 1e-7));
    }

    #[test]
    fn hog_of_constant_is_zero() {
        let v = lookup("hog").extract(&GrayImage::filled(224, 224, 0.3)).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hog_sees_orientation() {
        // vertical stripes: horizontal gradients land in the bins around 0/180 degrees
        let img = GrayImage::from_fn(224, 224, |x, _| if (x / 8) % 2 == 0 { 0.8 } else { 0.2 });
        let v = lookup("hog").extract(&img).unwrap();
        let mut per_bin = [0f32; 9];
        for (i, x) in v.iter().enumerate() {
            per_bin[i % 9] += x;
        }
        let vertical = per_bin[4];
        assert!(per_bin[0] + per_bin[8] > 10.0 * vertical.max(1e-6), "{per_bin:?}");
    }

    #[test]
    fn randconv_is_deterministic() {
        let x = random_state(1);
        let a = RandomConv::new(3);
        assert_eq!(a.extract(&x).unwrap(), a.extract(&x).unwrap());
        assert_eq!(a.extract(&x).unwrap(), RandomConv::new(3).extract(&x).unwrap());
        assert_ne!(a.extract(&x).unwrap(), RandomConv::new(4).extract(&x).unwrap());
    }

    #[test]
    fn randconv_matches_direct_convolution() {
        let x = random_state(2);
        let rc = RandomConv::new(0);
        let fast = rc.extract(&x).unwrap();
        let side = RandomConv::out_side();
        let edges: Vec<usize> = (0..=4).map(|i| i * side / 4).collect();
        let (c, gy, gx) = (5usize, 2usize, 1usize);
        let mut acc = 0f64;
        for y in edges[gy]..edges[gy + 1] {
            for xx in edges[gx]..edges[gx + 1] {
                let mut s = 0f64;
                for dy in 0..7 {
                    for dx in 0..7 {
                        s += rc.weights[c * 49 + dy * 7 + dx] as f64
                            * x.get(xx * 4 + dx, y * 4 + dy) as f64;
                    }
                }
                acc += s.max(0.0);
            }
        }
        let n = ((edges[gy + 1] - edges[gy]) * (edges[gx + 1] - edges[gx])) as f64;
        assert!((fast[c * 16 + gy * 4 + gx] as f64 - acc / n).abs() < 1e-4);
    }

    #[test]
    fn wrong_size_is_contract_error() {
        let small = GrayImage::filled(100, 224, 0.5);
        for n in ["raw28", "hog", "randconv"] {
            assert!(matches!(lookup(n).extract(&small), Err(Error::Contract(_))));
        }
    }

    #[test]
    fn builtins_are_finite_on_random_inputs() {
        let exts: Vec<_> = ["raw28", "hog", "randconv"].iter().map(|n| lookup(n)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for i in 0..1000u64 {
            // mix of noise, constants and sparse images
            let img = match i % 3 {
                0 => random_state(i),
                1 => GrayImage::filled(224, 224, rng.random::<f32>()),
                _ => GrayImage::from_fn(224, 224, |x, y| ((x * 7 + y * 13 + i as usize) % 97 == 0) as u8 as f32),
            };
            for e in &exts {
                let v = e.extract(&img).unwrap();
                assert_eq!(v.len(), e.dim());
                assert!(v.iter().all(|x| x.is_finite()), "{} on input {i}", e.name());
            }
        }
    }

    #[test]
    fn vecdir_reads_by_hash() {
        let dir = tempfile::tempdir().unwrap();
        let ext = PrecomputedVectors::new(dir.path(), 3);
        let img = random_state(4);
        assert!(ext.extract(&img).is_err());
        fs::write(ext.path_for(&img), "1 2.5 -3\n").unwrap();
        assert_eq!(ext.extract(&img).unwrap(), vec![1.0, 2.5, -3.0]);
        fs::write(ext.path_for(&img), "1 2\n").unwrap();
        assert!(matches!(ext.extract(&img), Err(Error::Provider(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn hog_ignores_global_shift(seed in 0u64..10_000, c in -0.2f32..0.2) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base = GrayImage::from_fn(224, 224, |_, _| 0.25 + 0.5 * rng.random::<f32>());
            let shifted = GrayImage::from_fn(224, 224, |x, y| base.get(x, y) + c);
            let hog = GradientHistogram::default();
            let (a, b) = (hog.extract(&base).unwrap(), hog.extract(&shifted).unwrap());
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-3, "{x} vs {y}");
            }
        }

        #[test]
        fn raw_scales_linearly(seed in 0u64..10_000, a in 0.01f32..=1.0) {
            let x = random_state(seed);
            let scaled = GrayImage::from_fn(224, 224, |i, j| a * x.get(i, j));
            let raw = RawDownsample::new(28);
            let (u, v) = (raw.extract(&x).unwrap(), raw.extract(&scaled).unwrap());
            for (p, q) in u.iter().zip(&v) {
                prop_assert!((a * p - q).abs() < 1e-5);
            }
        }
    }
}
