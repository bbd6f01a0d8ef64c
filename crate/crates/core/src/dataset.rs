//! On-disk dataset layout.
//!
//! ```text
//! <root>/scenes/<id>/cam_<t>.txt     camera text block per frame
//!                   depth_<t>.vgrd   f32 grid, X = image rows, Y = columns, Z = 1
//!                   labels.vgrd      u8 labels at output resolution
//!                   meta.txt         key=value: id, seed, frames, origin, voxel_size, dims
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::camera::{format_camera, parse_cameras};
use crate::error::{Error, Result};
use crate::synth::Sample;
use crate::vgrid::{GridData, VGrid};
use crate::voxel::SceneSpec;

pub fn scene_dir(root: &Path, id: &str) -> PathBuf {
    root.join("scenes").join(id)
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len() as u64;
        let l = line.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| Error::format(start, format!("expected key=value, got `{l}`")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn parse_list<V: std::str::FromStr, const N: usize>(key: &str, v: &str) -> Result<[V; N]> {
    let items: Vec<V> = v
        .split(',')
        .map(|p| p.trim().parse::<V>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected {N} comma-separated values, got `{v}`")))
}

fn field<'a>(m: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    m.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Config(format!("meta.txt: missing `{key}`")))
}

fn parse_num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

pub fn format_spec(spec: &SceneSpec) -> String {
    let [ox, oy, oz] = spec.origin;
    let [x, y, z] = spec.dims;
    format!("origin={ox},{oy},{oz}\nvoxel_size={}\ndims={x},{y},{z}\n", spec.voxel_size)
}

pub fn parse_spec(m: &BTreeMap<String, String>) -> Result<SceneSpec> {
    SceneSpec::new(
        parse_list("origin", field(m, "origin")?)?,
        parse_num("voxel_size", field(m, "voxel_size")?)?,
        parse_list("dims", field(m, "dims")?)?,
    )
}

pub fn write_sample(root: &Path, s: &Sample) -> Result<PathBuf> {
    if s.cams.len() != s.depths.len() {
        return Err(Error::invalid(format!(
            "sample {}: {} cameras for {} depth maps",
            s.id,
            s.cams.len(),
            s.depths.len()
        )));
    }
    let dir = scene_dir(root, &s.id);
    fs::create_dir_all(&dir)?;
    for (t, (cam, depth)) in s.cams.iter().zip(&s.depths).enumerate() {
        fs::write(dir.join(format!("cam_{t}.txt")), format_camera(cam))?;
        VGrid::new([cam.height, cam.width, 1], [0.0; 3], 1.0, GridData::F32(depth.clone()))?
            .save(dir.join(format!("depth_{t}.vgrd")))?;
    }
    VGrid::from_labels(&s.labels).save(dir.join("labels.vgrd"))?;
    let mut meta = String::new();
    writeln!(meta, "id={}", s.id).unwrap();
    writeln!(meta, "seed={}", s.seed).unwrap();
    writeln!(meta, "frames={}", s.cams.len()).unwrap();
    meta.push_str(&format_spec(&s.labels.spec));
    fs::write(dir.join("meta.txt"), meta)?;
    Ok(dir)
}

pub fn read_sample(dir: &Path) -> Result<Sample> {
    let meta = parse_key_values(&fs::read_to_string(dir.join("meta.txt"))?)?;
    let frames: usize = parse_num("frames", field(&meta, "frames")?)?;
    let spec = parse_spec(&meta)?;
    let mut cams = Vec::with_capacity(frames);
    let mut depths = Vec::with_capacity(frames);
    for t in 0..frames {
        let mut c = parse_cameras(&fs::read_to_string(dir.join(format!("cam_{t}.txt")))?)?;
        if c.len() != 1 {
            return Err(Error::format(0, format!("cam_{t}.txt: expected one camera, found {}", c.len())));
        }
        let cam = c.remove(0);
        let g = VGrid::load(dir.join(format!("depth_{t}.vgrd")))?;
        let GridData::F32(d) = g.data else {
            return Err(Error::format(8, format!("depth_{t}.vgrd: expected f32 data")));
        };
        if g.dims != [cam.height, cam.width, 1] {
            return Err(Error::shape(
                "read_sample",
                format!("depth_{t} dims {:?} for a {}x{} camera", g.dims, cam.width, cam.height),
            ));
        }
        cams.push(cam);
        depths.push(d);
    }
    let labels = VGrid::load(dir.join("labels.vgrd"))?.into_labels(spec)?;
    Ok(Sample {
        id: field(&meta, "id")?.to_string(),
        seed: parse_num("seed", field(&meta, "seed")?)?,
        cams,
        depths,
        labels,
    })
}

/// Scene directories under `root/scenes`, sorted by name.
pub fn list_samples(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root.join("scenes"))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.txt").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    list_samples(root)?.iter().map(|d| read_sample(d)).collect()
}
