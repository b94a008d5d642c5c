//! Text formats for scenes, cameras and dataset manifests, and 8-bit PNG
//! images.
//!
//! Scene file:
//! ```text
//! GSW1 K=<k> SF=48
//! <x y z> <qw qx qy qz> <3 log-scales> <opacity logit> <48 sf> <2K sc>
//! ```
//! Camera file, one block per camera:
//! ```text
//! fx fy cx cy width height near
//! <4 rows of the world-to-camera matrix>
//! ```
//! Dataset manifest, one line per view (paths relative to the manifest):
//! ```text
//! <reference|train|test> <image> <camera index> <3 gains> <3 biases> <n> [x y w h r g b]*n
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, Vector3};

use super::{Dataset, Occluder, Perturbation, View};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::frame::Image;
use crate::scene::{GaussianCloud, GaussianPoint, SF_DIM};

pub const SCENE_MAGIC: &str = "GSW1";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CAMERAS_FILE: &str = "cameras.txt";
pub const INIT_SCENE_FILE: &str = "init_scene.txt";

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_floats(path: &Path, line: usize, fields: &[&str]) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>()
                .map_err(|_| parse_err(path, line, format!("bad number `{f}`")))
        })
        .collect()
}

/// Non-empty lines with their 1-based numbers, `#` comments removed.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then_some((i + 1, l))
    })
}

// Scenes

pub fn scene_to_string(cloud: &GaussianCloud) -> String {
    let mut out = format!("{SCENE_MAGIC} K={} SF={SF_DIM}\n", cloud.k);
    for p in &cloud.points {
        let values = p
            .position
            .iter()
            .chain(&p.rotation)
            .chain(p.log_scale.iter())
            .chain(std::iter::once(&p.opacity_logit))
            .chain(&p.intrinsic)
            .chain(p.sampling.iter().flatten());
        let mut first = true;
        for v in values {
            if !first {
                out.push(' ');
            }
            first = false;
            let _ = write!(out, "{v:.17e}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_scene(text: &str, path: &Path) -> Result<GaussianCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (ln, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty scene file"))?;
    let f: Vec<&str> = header.split_whitespace().collect();
    let k = match f.as_slice() {
        [magic, k, sf] if *magic == SCENE_MAGIC && *sf == format!("SF={SF_DIM}") => k
            .strip_prefix("K=")
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| parse_err(path, ln, format!("bad K field `{k}`")))?,
        _ => {
            return Err(parse_err(
                path,
                ln,
                format!("expected header `{SCENE_MAGIC} K=<k> SF={SF_DIM}`"),
            ))
        }
    };
    let width = 3 + 4 + 3 + 1 + SF_DIM + 2 * k;
    let mut points = Vec::new();
    for (ln, line) in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != width {
            return Err(parse_err(
                path,
                ln,
                format!("point has {} values, expected {width}", fields.len()),
            ));
        }
        let v = parse_floats(path, ln, &fields)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(parse_err(path, ln, "non-finite value"));
        }
        points.push(GaussianPoint {
            position: Vector3::new(v[0], v[1], v[2]),
            rotation: [v[3], v[4], v[5], v[6]],
            log_scale: Vector3::new(v[7], v[8], v[9]),
            opacity_logit: v[10],
            intrinsic: v[11..11 + SF_DIM].to_vec(),
            sampling: v[11 + SF_DIM..].chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        });
    }
    GaussianCloud::new(points, k)
}

pub fn save_scene(cloud: &GaussianCloud, path: &Path) -> Result<()> {
    write_text(path, &scene_to_string(cloud))
}

pub fn load_scene(path: &Path) -> Result<GaussianCloud> {
    parse_scene(&read_text(path)?, path)
}

// Cameras

pub fn cameras_to_string(cameras: &[Camera]) -> String {
    let mut out = String::new();
    for c in cameras {
        let _ = writeln!(
            out,
            "{:.17e} {:.17e} {:.17e} {:.17e} {} {} {:.17e}",
            c.fx, c.fy, c.cx, c.cy, c.width, c.height, c.near_clip
        );
        for r in 0..4 {
            let row: Vec<String> = (0..4).map(|j| format!("{:.17e}", c.world_to_cam[(r, j)])).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
    }
    out
}

pub fn parse_cameras(text: &str, path: &Path) -> Result<Vec<Camera>> {
    let lines: Vec<(usize, &str)> = content_lines(text).collect();
    let mut cameras = Vec::new();
    for block in lines.chunks(5) {
        let (ln, head) = block[0];
        if block.len() < 5 {
            return Err(parse_err(path, ln, "camera block needs 5 lines"));
        }
        let f: Vec<&str> = head.split_whitespace().collect();
        if f.len() != 7 {
            return Err(parse_err(path, ln, "expected `fx fy cx cy width height near`"));
        }
        let intr = parse_floats(path, ln, &[f[0], f[1], f[2], f[3], f[6]])?;
        let size = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| parse_err(path, ln, format!("bad image size `{s}`")))
        };
        let (width, height) = (size(f[4])?, size(f[5])?);
        let mut m = Matrix4::zeros();
        for (r, (ln, row)) in block[1..].iter().enumerate() {
            let v = parse_floats(path, *ln, &row.split_whitespace().collect::<Vec<_>>())?;
            if v.len() != 4 {
                return Err(parse_err(path, *ln, "matrix row needs 4 values"));
            }
            for (j, x) in v.into_iter().enumerate() {
                m[(r, j)] = x;
            }
        }
        let cam = Camera::new(intr[0], intr[1], intr[2], intr[3], width, height, m, intr[4])
            .map_err(|e| parse_err(path, ln, e.to_string()))?;
        cameras.push(cam);
    }
    Ok(cameras)
}

pub fn save_cameras(cameras: &[Camera], path: &Path) -> Result<()> {
    write_text(path, &cameras_to_string(cameras))
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    parse_cameras(&read_text(path)?, path)
}

// Images

/// Quantizes to 8 bits; reading back dequantizes to bin centers
/// `(q + 0.5) / 256`.
pub fn write_image(image: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = image
        .data
        .iter()
        .map(|v| (v * 256.0).floor().clamp(0.0, 255.0) as u8)
        .collect();
    let buf = image::RgbImage::from_raw(image.width as u32, image.height as u32, bytes)
        .ok_or_else(|| Error::shape("image buffer does not match its size"))?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|q| (q as f64 + 0.5) / 256.0).collect();
    Image::from_vec(w as usize, h as usize, data)
}

// Datasets

fn manifest_line(role: &str, image: &str, camera: usize, view: &View) -> String {
    let mut s = format!("{role} {image} {camera}");
    for v in view.perturbation.gains.iter().chain(&view.perturbation.biases) {
        let _ = write!(s, " {v:.17e}");
    }
    let _ = write!(s, " {}", view.occluders.len());
    for o in &view.occluders {
        let _ = write!(
            s,
            " {} {} {} {} {:.17e} {:.17e} {:.17e}",
            o.x, o.y, o.width, o.height, o.color[0], o.color[1], o.color[2]
        );
    }
    s
}

/// Writes images, cameras, the initial cloud and the manifest into `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|source| Error::Io {
        path: images.clone(),
        source,
    })?;
    let mut manifest = String::new();
    let mut cameras = Vec::new();
    let views = dataset
        .train
        .iter()
        .enumerate()
        .map(|(i, v)| (if i == dataset.reference { "reference" } else { "train" }, i, v))
        .chain(dataset.test.iter().enumerate().map(|(i, v)| ("test", i, v)));
    for (role, i, view) in views {
        let kind = if role == "test" { "test" } else { "train" };
        let name = format!("images/{kind}_{i:03}.png");
        write_image(&view.image, &dir.join(&name))?;
        manifest.push_str(&manifest_line(role, &name, cameras.len(), view));
        manifest.push('\n');
        cameras.push(view.camera.clone());
    }
    save_cameras(&cameras, &dir.join(CAMERAS_FILE))?;
    save_scene(&dataset.init_cloud, &dir.join(INIT_SCENE_FILE))?;
    write_text(&dir.join(MANIFEST_FILE), &manifest)
}

/// Reads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = read_text(&manifest_path)?;
    let cameras = load_cameras(&dir.join(CAMERAS_FILE))?;
    let init_cloud = load_scene(&dir.join(INIT_SCENE_FILE))?;
    let path = manifest_path.as_path();
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut reference = None;
    for (ln, line) in content_lines(&text) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 10 {
            return Err(parse_err(path, ln, "view line needs role, image, camera, 6 color values and an occluder count"));
        }
        let camera_index: usize = f[2]
            .parse()
            .map_err(|_| parse_err(path, ln, format!("bad camera index `{}`", f[2])))?;
        let camera = cameras
            .get(camera_index)
            .cloned()
            .ok_or_else(|| parse_err(path, ln, format!("camera index {camera_index} out of range")))?;
        let colors = parse_floats(path, ln, &f[3..9])?;
        let perturbation = Perturbation {
            gains: [colors[0], colors[1], colors[2]],
            biases: [colors[3], colors[4], colors[5]],
        };
        let n: usize = f[9]
            .parse()
            .map_err(|_| parse_err(path, ln, format!("bad occluder count `{}`", f[9])))?;
        if f.len() != 10 + 7 * n {
            return Err(parse_err(path, ln, format!("expected {n} occluders of 7 values each")));
        }
        let mut occluders = Vec::with_capacity(n);
        for o in f[10..].chunks_exact(7) {
            let size: Vec<usize> = o[..4]
                .iter()
                .map(|s| s.parse().map_err(|_| parse_err(path, ln, format!("bad occluder value `{s}`"))))
                .collect::<Result<_>>()?;
            let c = parse_floats(path, ln, &o[4..])?;
            occluders.push(Occluder {
                x: size[0],
                y: size[1],
                width: size[2],
                height: size[3],
                color: [c[0], c[1], c[2]],
            });
        }
        let image_path: PathBuf = dir.join(f[1]);
        let image = read_image(&image_path)?;
        if image.width != camera.width || image.height != camera.height {
            return Err(parse_err(path, ln, "image size does not match its camera"));
        }
        let view = View {
            image,
            camera,
            perturbation,
            occluders,
        };
        match f[0] {
            "reference" => {
                if reference.is_some() {
                    return Err(parse_err(path, ln, "more than one reference view"));
                }
                reference = Some(train.len());
                train.push(view);
            }
            "train" => train.push(view),
            "test" => test.push(view),
            other => return Err(parse_err(path, ln, format!("unknown role `{other}`"))),
        }
    }
    if train.is_empty() {
        return Err(parse_err(path, 0, "dataset has no training views"));
    }
    Ok(Dataset {
        train,
        test,
        reference: reference.unwrap_or(0),
        init_cloud,
    })
}
