//! Scene tiling, annotation parsing, and detection merging for large aerial
//! images in the DOTA text formats.
//!
//! Scenes are far larger than what a detector ingests, so they are cropped
//! into fixed-size overlapping patches; detections made on patches are later
//! translated back into scene coordinates and deduplicated with per-class
//! non-maximum suppression. All geometry here is axis-aligned: rotated quad
//! annotations are reduced to their bounding rectangle on the way in.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::iou_hbb;

/// The fifteen object categories, in canonical report order.
pub const CATEGORIES: [&str; 15] = [
    "plane",
    "baseball-diamond",
    "bridge",
    "ground-track-field",
    "small-vehicle",
    "large-vehicle",
    "ship",
    "tennis-court",
    "basketball-court",
    "storage-tank",
    "soccer-ball-field",
    "roundabout",
    "harbor",
    "swimming-pool",
    "helicopter",
];

/// Horizontal (axis-aligned) bounding box, corners inclusive of `min`,
/// exclusive semantics are never assumed: area is plain `(xmax-xmin)*(ymax-ymin)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hbb {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl Hbb {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Hbb {
        Hbb { xmin, ymin, xmax, ymax }
    }

    pub fn width(&self) -> f64 {
        (self.xmax - self.xmin).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.ymax - self.ymin).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_degenerate(&self) -> bool {
        self.area() <= 0.0
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.xmin + self.xmax) / 2.0, (self.ymin + self.ymax) / 2.0)
    }

    /// Intersection rectangle (may be degenerate when boxes are disjoint).
    pub fn intersect(&self, other: &Hbb) -> Hbb {
        Hbb {
            xmin: self.xmin.max(other.xmin),
            ymin: self.ymin.max(other.ymin),
            xmax: self.xmax.min(other.xmax),
            ymax: self.ymax.min(other.ymax),
        }
    }

    /// Shift by (-dx, -dy): scene coords -> patch-local coords.
    pub fn translated(&self, dx: f64, dy: f64) -> Hbb {
        Hbb {
            xmin: self.xmin + dx,
            ymin: self.ymin + dy,
            xmax: self.xmax + dx,
            ymax: self.ymax + dy,
        }
    }

    /// Axis-aligned quad representation (clockwise from top-left), the shape
    /// annotation files expect.
    pub fn as_quad(&self) -> [[f64; 2]; 4] {
        [
            [self.xmin, self.ymin],
            [self.xmax, self.ymin],
            [self.xmax, self.ymax],
            [self.xmin, self.ymax],
        ]
    }
}

/// Tightest axis-aligned box around a quadrilateral.
pub fn quad_to_hbb(quad: &[[f64; 2]; 4]) -> Hbb {
    let mut b = Hbb::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in quad {
        b.xmin = b.xmin.min(p[0]);
        b.ymin = b.ymin.min(p[1]);
        b.xmax = b.xmax.max(p[0]);
        b.ymax = b.ymax.max(p[1]);
    }
    b
}

/// One labelled object in a scene or patch.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub quad: [[f64; 2]; 4],
    pub category: String,
    pub difficult: bool,
}

impl Annotation {
    pub fn hbb(&self) -> Hbb {
        quad_to_hbb(&self.quad)
    }
}

/// Scene dimensions as listed in a dataset manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneMeta {
    pub id: String,
    pub width: usize,
    pub height: usize,
}

/// A window cut out of a scene, with annotations remapped into its frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub scene_id: String,
    pub x0: usize,
    pub y0: usize,
    pub window: usize,
    pub annotations: Vec<Annotation>,
}

impl Patch {
    /// Stable identifier encoding the source scene and the crop origin.
    pub fn id(&self) -> String {
        format!("{}__{}__{}", self.scene_id, self.x0, self.y0)
    }
}

/// One scored box in some image's coordinate frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub category: String,
    pub score: f64,
    pub bbox: Hbb,
}

// ---------------------------------------------------------------------------
// text formats

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn parse_f64(tok: &str, what: &str, path: &Path, line: usize) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| parse_err(path, line, format!("invalid {what} {tok:?}")))
}

/// Parse one scene/patch annotation file.
///
/// Lines are `x1 y1 x2 y2 x3 y3 x4 y4 category [difficult]`; the metadata
/// header lines some files carry (`imagesource:`, `gsd:`) and blank lines are
/// skipped. Errors carry the file path and 1-based line number.
pub fn parse_annotation_file(path: &Path) -> Result<Vec<Annotation>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with("imagesource") || line.starts_with("gsd") {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 9 && toks.len() != 10 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected 9 or 10 fields, got {}", toks.len()),
            ));
        }
        let mut quad = [[0.0; 2]; 4];
        for c in 0..4 {
            quad[c][0] = parse_f64(toks[2 * c], "coordinate", path, lineno)?;
            quad[c][1] = parse_f64(toks[2 * c + 1], "coordinate", path, lineno)?;
        }
        let category = toks[8].to_string();
        let difficult = match toks.get(9) {
            None => false,
            Some(&"0") => false,
            Some(&"1") => true,
            Some(other) => {
                return Err(parse_err(path, lineno, format!("difficult flag must be 0 or 1, got {other:?}")))
            }
        };
        out.push(Annotation { quad, category, difficult });
    }
    Ok(out)
}

/// Write annotations in the same format [`parse_annotation_file`] reads.
pub fn write_annotation_file(path: &Path, annotations: &[Annotation]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for a in annotations {
        let q = &a.quad;
        writeln!(
            f,
            "{} {} {} {} {} {} {} {} {} {}",
            q[0][0], q[0][1], q[1][0], q[1][1], q[2][0], q[2][1], q[3][0], q[3][1],
            a.category,
            if a.difficult { 1 } else { 0 }
        )?;
    }
    Ok(())
}

/// Parse a scene manifest: one `scene_id width height` line per scene.
pub fn parse_manifest(path: &Path) -> Result<Vec<SceneMeta>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(parse_err(path, lineno, format!("expected `id width height`, got {} fields", toks.len())));
        }
        let width: usize = toks[1]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("invalid width {:?}", toks[1])))?;
        let height: usize = toks[2]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("invalid height {:?}", toks[2])))?;
        if width == 0 || height == 0 {
            return Err(parse_err(path, lineno, "scene dimensions must be >= 1"));
        }
        out.push(SceneMeta { id: toks[0].to_string(), width, height });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// tiling

/// Crop origins along one axis for sliding windows of `window` every
/// `stride` pixels. The final window is pulled back so it ends at the scene
/// edge instead of spilling past it; scenes smaller than the window yield a
/// single origin 0 (callers pad).
pub fn patch_starts(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut s = 0usize;
    loop {
        if s + window >= extent {
            starts.push(extent.saturating_sub(window));
            break;
        }
        starts.push(s);
        s += stride;
    }
    starts
}

/// Cut a scene into overlapping `window`x`window` patches and remap its
/// annotations into each patch.
///
/// An object is assigned to a patch when at least `min_kept_fraction` of its
/// bounding-box area survives clipping to the patch window (boxes on patch
/// borders appear in every patch that keeps enough of them). Clipped boxes
/// are stored in patch-local coordinates as axis-aligned quads.
pub fn crop_scene(
    meta: &SceneMeta,
    annotations: &[Annotation],
    window: usize,
    overlap: usize,
    min_kept_fraction: f64,
) -> Result<Vec<Patch>> {
    if window == 0 {
        return Err(Error::invalid("window must be >= 1"));
    }
    if overlap >= window {
        return Err(Error::invalid(format!("overlap {overlap} must be smaller than window {window}")));
    }
    if !(0.0..=1.0).contains(&min_kept_fraction) {
        return Err(Error::invalid("min kept fraction must be in [0, 1]"));
    }
    let stride = window - overlap;
    let xs = patch_starts(meta.width, window, stride);
    let ys = patch_starts(meta.height, window, stride);

    let mut patches = Vec::with_capacity(xs.len() * ys.len());
    for &y0 in &ys {
        for &x0 in &xs {
            let rect = Hbb::new(x0 as f64, y0 as f64, (x0 + window) as f64, (y0 + window) as f64);
            let mut kept = Vec::new();
            for a in annotations {
                let full = a.hbb();
                if full.is_degenerate() {
                    continue;
                }
                let clipped = full.intersect(&rect);
                if clipped.is_degenerate() {
                    continue;
                }
                if clipped.area() < min_kept_fraction * full.area() {
                    continue;
                }
                let local = clipped.translated(-(x0 as f64), -(y0 as f64));
                kept.push(Annotation {
                    quad: local.as_quad(),
                    category: a.category.clone(),
                    difficult: a.difficult,
                });
            }
            patches.push(Patch {
                scene_id: meta.id.clone(),
                x0,
                y0,
                window,
                annotations: kept,
            });
        }
    }
    Ok(patches)
}

/// Write one annotation file per patch plus a `patches.txt` manifest
/// (`patch_id x0 y0 window scene_id` per line) into `out_dir`.
pub fn write_patches(out_dir: &Path, patches: &[Patch]) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut manifest = fs::File::create(out_dir.join("patches.txt"))?;
    for p in patches {
        writeln!(manifest, "{} {} {} {} {}", p.id(), p.x0, p.y0, p.window, p.scene_id)?;
        write_annotation_file(&out_dir.join(format!("{}.txt", p.id())), &p.annotations)?;
    }
    Ok(())
}

/// Read back patches written by [`write_patches`].
pub fn read_patches(dir: &Path) -> Result<Vec<Patch>> {
    let manifest_path = dir.join("patches.txt");
    let text = fs::read_to_string(&manifest_path)?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 5 {
            return Err(parse_err(&manifest_path, lineno, format!("expected 5 fields, got {}", toks.len())));
        }
        let parse_usize = |tok: &str, what: &str| -> Result<usize> {
            tok.parse()
                .map_err(|_| parse_err(&manifest_path, lineno, format!("invalid {what} {tok:?}")))
        };
        let patch = Patch {
            scene_id: toks[4].to_string(),
            x0: parse_usize(toks[1], "x0")?,
            y0: parse_usize(toks[2], "y0")?,
            window: parse_usize(toks[3], "window")?,
            annotations: parse_annotation_file(&dir.join(format!("{}.txt", toks[0])))?,
        };
        if patch.id() != toks[0] {
            return Err(parse_err(&manifest_path, lineno, format!("patch id {:?} does not match origin fields", toks[0])));
        }
        out.push(patch);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// merging patch detections back into scenes

/// Translate a patch-local detection into scene coordinates, clipping to the
/// scene rectangle. Returns `None` when nothing of the box lands inside the
/// scene (possible in the padded region of undersized scenes).
pub fn remap_detection(
    det: &Detection,
    x0: usize,
    y0: usize,
    scene_id: &str,
    scene_w: usize,
    scene_h: usize,
) -> Option<Detection> {
    let shifted = det.bbox.translated(x0 as f64, y0 as f64);
    let clipped = shifted.intersect(&Hbb::new(0.0, 0.0, scene_w as f64, scene_h as f64));
    if clipped.is_degenerate() {
        return None;
    }
    Some(Detection {
        image_id: scene_id.to_string(),
        category: det.category.clone(),
        score: det.score,
        bbox: clipped,
    })
}

/// Greedy per-category non-maximum suppression.
///
/// Detections are visited in descending score (ties broken by insertion
/// order, so results are deterministic); a detection is dropped when it
/// overlaps an already-kept detection of the same category above
/// `iou_thresh`.
pub fn nms(detections: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .total_cmp(&detections[a].score)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let d = &detections[i];
        let suppressed = kept.iter().any(|&k| {
            detections[k].category == d.category && iou_hbb(&detections[k].bbox, &d.bbox) > iou_thresh
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| detections[i].clone()).collect()
}

/// Merge per-patch detections of one scene: remap to scene coordinates,
/// then collapse duplicates from overlapping patches with per-category NMS.
pub fn merge_patch_detections(
    scene: &SceneMeta,
    patch_dets: &[(usize, usize, Vec<Detection>)],
    iou_thresh: f64,
) -> Vec<Detection> {
    let mut all = Vec::new();
    for (x0, y0, dets) in patch_dets {
        for d in dets {
            if let Some(r) = remap_detection(d, *x0, *y0, &scene.id, scene.width, scene.height) {
                all.push(r);
            }
        }
    }
    nms(&all, iou_thresh)
}

// ---------------------------------------------------------------------------
// results files (one file per category)

/// Write detections as one `Task2_<category>.txt` per category with lines
/// `image_id score xmin ymin xmax ymax`. Categories with no detections still
/// get an (empty) file so consumers can distinguish "no hits" from "missing".
pub fn write_results(dir: &Path, detections: &[Detection], categories: &[&str]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut by_cat: BTreeMap<&str, Vec<&Detection>> = BTreeMap::new();
    for c in categories {
        by_cat.insert(c, Vec::new());
    }
    for d in detections {
        by_cat
            .entry(d.category.as_str())
            .or_default()
            .push(d);
    }
    for (cat, dets) in by_cat {
        let mut f = fs::File::create(dir.join(format!("Task2_{cat}.txt")))?;
        for d in dets {
            writeln!(
                f,
                "{} {:.6} {} {} {} {}",
                d.image_id, d.score, d.bbox.xmin, d.bbox.ymin, d.bbox.xmax, d.bbox.ymax
            )?;
        }
    }
    Ok(())
}

/// Read every `Task2_*.txt` file in `dir` back into detections.
pub fn read_results(dir: &Path) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    let mut files: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("Task2_") && n.ends_with(".txt"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    for path in files {
        let name = path.file_name().unwrap().to_str().unwrap();
        let category = name["Task2_".len()..name.len() - ".txt".len()].to_string();
        let text = fs::read_to_string(&path)?;
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 6 {
                return Err(parse_err(&path, lineno, format!("expected 6 fields, got {}", toks.len())));
            }
            out.push(Detection {
                image_id: toks[0].to_string(),
                category: category.clone(),
                score: parse_f64(toks[1], "score", &path, lineno)?,
                bbox: Hbb::new(
                    parse_f64(toks[2], "xmin", &path, lineno)?,
                    parse_f64(toks[3], "ymin", &path, lineno)?,
                    parse_f64(toks[4], "xmax", &path, lineno)?,
                    parse_f64(toks[5], "ymax", &path, lineno)?,
                ),
            });
        }
    }
    Ok(out)
}
